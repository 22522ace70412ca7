use evolvegen::compile::*;
use evolvegen::graph::*;
use rand::Rng as _;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

fn main() {
    let mut checked = 0u64;
    for seed in 0..500u64 {
        let len = 1 + (seed % 20) as usize;
        let g = match generate_fresh(&mut ChaCha8Rng::seed_from_u64(seed), len) {
            Ok(g) => g,
            Err(_) => continue,
        };
        let basic = schedule(&g, &ScheduleStrategy::Basic).unwrap();
        let opt = match schedule(&g, &ScheduleStrategy::optimized()) {
            Ok(ts) => ts,
            Err(CompileError::ResourceBound { .. }) => continue,
        };
        let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0xDEAD);
        for _ in 0..20 {
            let inputs: BTreeMap<String, u64> = g
                .inputs
                .iter()
                .map(|pi| (pi.name.clone(), r.random::<u64>() & ((1u64 << pi.width) - 1).max(u64::MAX >> (64 - pi.width))))
                .collect();
            let want = interpret(&g, &inputs).unwrap();
            for (label, ts) in [("basic", &basic), ("opt", &opt)] {
                let tr = simulate(ts, &inputs, 3_000_000);
                if tr.first_valid_cycle.map(|c| c) != ts.latency {
                    println!("LATENCY MISMATCH seed {} {} {:?} vs {:?}", seed, label, tr.first_valid_cycle, ts.latency);
                    std::process::exit(1);
                }
                let got = tr.design_outputs_at_valid().unwrap();
                if got != want {
                    println!("VALUE MISMATCH seed {} {} inputs {:?}\n got {:?}\nwant {:?}", seed, label, inputs, got, want);
                    std::process::exit(1);
                }
                checked += 1;
            }
        }
    }
    println!("all good, {} simulations checked", checked);
}
