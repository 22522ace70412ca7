use std::collections::BTreeMap;

use rand::Rng as _;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::graph::*;
use crate::value::mask64;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_inputs<R: rand::Rng>(g: &ComputationGraph, r: &mut R) -> BTreeMap<String, u64> {
    g.inputs
        .iter()
        .map(|pi| (pi.name.clone(), r.random::<u64>() & mask64(pi.width)))
        .collect()
}

fn int_attrs(kind: OpKind, width: u32) -> OpAttrs {
    OpAttrs {
        op_kind: kind,
        width,
        dtype: DType::Int,
        signed: false,
        int_bits: width,
        rounding: Rounding::Truncate,
        saturation: Saturation::Wrap,
    }
}

/// A two-input single-ADD graph.
fn adder_graph(width: u32) -> ComputationGraph {
    let mut g = ComputationGraph::new(vec![
        PrimaryInput {
            name: "a".into(),
            width,
            dtype: DType::Int,
        },
        PrimaryInput {
            name: "b".into(),
            width,
            dtype: DType::Int,
        },
    ]);
    let add = g.insert_node(NodeKind::Op(int_attrs(OpKind::Add, width)), None);
    g.edges.push(DataEdge {
        producer: Producer::Input(0),
        consumer: add,
        slot: 0,
    });
    g.edges.push(DataEdge {
        producer: Producer::Input(1),
        consumer: add,
        slot: 1,
    });
    g.recompute_outputs();
    g
}

/// Multiply-accumulate over a loop: acc[i] = acc[i-1] + a*b, with the loop
/// marked for full unrolling and pipelining so the two strategies diverge.
fn mac_graph(trip: i64, fully_unrolled: bool) -> ComputationGraph {
    let mut g = ComputationGraph::new(vec![
        PrimaryInput {
            name: "a".into(),
            width: 8,
            dtype: DType::Int,
        },
        PrimaryInput {
            name: "b".into(),
            width: 8,
            dtype: DType::Int,
        },
    ]);
    let la = LoopAttrs {
        start: 0,
        end: trip,
        step: 1,
        pipelined: true,
        flattened: false,
        unroll_factor: 1,
        fully_unrolled,
    };
    let l = g.insert_node(NodeKind::Loop(la), None);
    let mul = g.insert_node(NodeKind::Op(int_attrs(OpKind::Mul, 8)), Some(l));
    g.edges.push(DataEdge {
        producer: Producer::Input(0),
        consumer: mul,
        slot: 0,
    });
    g.edges.push(DataEdge {
        producer: Producer::Input(1),
        consumer: mul,
        slot: 1,
    });
    let acc = g.insert_node(NodeKind::Op(int_attrs(OpKind::Add, 8)), Some(l));
    g.edges.push(DataEdge {
        producer: Producer::Node(mul),
        consumer: acc,
        slot: 0,
    });
    g.edges.push(DataEdge {
        producer: Producer::Node(mul),
        consumer: acc,
        slot: 1,
    });
    let dep = g.insert_node(
        NodeKind::Dep {
            distance: 1,
            source: acc,
        },
        Some(l),
    );
    for e in &mut g.edges {
        if e.consumer == acc && e.slot == 1 {
            e.producer = Producer::Node(dep);
        }
    }
    g.recompute_outputs();
    assert!(validate(&g).is_valid());
    g
}

/// Check interpret == simulate(Basic) == simulate(Optimized) on `n_vec`
/// random input vectors.
fn check_equivalence(g: &ComputationGraph, n_vec: usize, seed: u64) {
    let basic = schedule(g, &ScheduleStrategy::Basic).expect("basic schedules");
    let opt = schedule(g, &ScheduleStrategy::optimized()).expect("optimized schedules");
    let mut r = rng(seed);
    for _ in 0..n_vec {
        let inputs = random_inputs(g, &mut r);
        let want = interpret(g, &inputs).expect("interpret");
        for (label, ts) in [("basic", &basic), ("optimized", &opt)] {
            let tr = simulate(ts, &inputs, 2_000_000);
            assert_eq!(
                tr.first_valid_cycle.map(|c| c),
                ts.latency,
                "{} latency mismatch on {:?}",
                label,
                inputs
            );
            let got = tr.design_outputs_at_valid().expect("valid reached");
            assert_eq!(
                got, want,
                "{} outputs diverge from interpreter on {:?}",
                label, inputs
            );
        }
    }
}

#[test]
fn single_add_basic_valid_at_cycle_one() {
    let g = adder_graph(8);
    let ts = schedule(&g, &ScheduleStrategy::Basic).unwrap();
    let mut inputs = BTreeMap::new();
    inputs.insert("a".to_string(), 200u64);
    inputs.insert("b".to_string(), 100u64);
    let tr = simulate(&ts, &inputs, 100);
    assert_eq!(tr.first_valid_cycle, Some(1));
    assert_eq!(tr.named_at_valid("out0"), Some((300 % 256) as u128));
}

#[test]
fn valid_stays_asserted() {
    let g = adder_graph(8);
    let ts = schedule(&g, &ScheduleStrategy::Basic).unwrap();
    let mut inputs = BTreeMap::new();
    inputs.insert("a".to_string(), 1u64);
    inputs.insert("b".to_string(), 2u64);
    let tr = simulate(&ts, &inputs, 50);
    let vi = tr.output_names.iter().position(|n| n == "valid").unwrap();
    let first = tr.first_valid_cycle.unwrap() as usize;
    assert!(tr.outputs[first..].iter().all(|o| o[vi] == 1));
}

#[test]
fn max_cycles_short_of_latency_gives_none() {
    let g = mac_graph(4, false);
    let ts = schedule(&g, &ScheduleStrategy::Basic).unwrap();
    let lat = ts.latency.unwrap();
    let mut inputs = BTreeMap::new();
    inputs.insert("a".to_string(), 1u64);
    inputs.insert("b".to_string(), 1u64);
    let tr = simulate(&ts, &inputs, lat - 1);
    assert_eq!(tr.first_valid_cycle, None);
}

#[test]
fn mac_unrolled_is_strictly_faster_and_equivalent() {
    let g = mac_graph(4, true);
    let basic = schedule(&g, &ScheduleStrategy::Basic).unwrap();
    let opt = schedule(&g, &ScheduleStrategy::optimized()).unwrap();
    assert!(
        opt.latency.unwrap() < basic.latency.unwrap(),
        "optimized {:?} must beat basic {:?}",
        opt.latency,
        basic.latency
    );
    // Structural divergence: different state variable multisets.
    let b_states: Vec<(u32,)> = basic.state_vars.iter().map(|s| (s.width,)).collect();
    let o_states: Vec<(u32,)> = opt.state_vars.iter().map(|s| (s.width,)).collect();
    assert_ne!(b_states, o_states);
    check_equivalence(&g, 200, 11);
}

#[test]
fn mac_pipelined_is_equivalent() {
    let g = mac_graph(6, false);
    check_equivalence(&g, 200, 12);
}

#[test]
fn threshold_one_registers_every_op() {
    // A chain of combinational ops at threshold 1: state vars >= op count.
    let mut g = adder_graph(8);
    let mut prev = g.outputs[0];
    for _ in 0..5 {
        let n = g.insert_node(NodeKind::Op(int_attrs(OpKind::Xor, 8)), None);
        g.edges.push(DataEdge {
            producer: Producer::Node(prev),
            consumer: n,
            slot: 0,
        });
        g.edges.push(DataEdge {
            producer: Producer::Input(0),
            consumer: n,
            slot: 1,
        });
        prev = n;
    }
    g.recompute_outputs();
    assert!(validate(&g).is_valid());
    let ts = schedule(
        &g,
        &ScheduleStrategy::Optimized {
            register_depth_threshold: 1,
        },
    )
    .unwrap();
    let ops = 6;
    assert!(
        ts.state_vars.len() >= ops,
        "{} state vars for {} ops",
        ts.state_vars.len(),
        ops
    );
    check_equivalence(&g, 50, 13);
}

#[test]
fn random_graphs_schedule_equivalently() {
    for seed in 0..120u64 {
        let len = 1 + (seed % 14) as usize;
        let g = generate_fresh(&mut rng(seed), len).expect("generate");
        check_equivalence(&g, 12, seed ^ 0xABCD);
    }
}

#[test]
fn resource_bound_on_tiny_budget() {
    let g = mac_graph(8, true);
    let err = schedule_with(&g, &ScheduleStrategy::optimized(), 10).unwrap_err();
    assert!(matches!(err, CompileError::ResourceBound { .. }));
}

#[test]
fn flattened_nest_is_equivalent_and_cheaper() {
    // outer (flattened, trip 3) containing only inner (trip 4) with a body op.
    let mut g = ComputationGraph::new(vec![PrimaryInput {
        name: "x".into(),
        width: 8,
        dtype: DType::Int,
    }]);
    let la_outer = LoopAttrs {
        start: 0,
        end: 3,
        step: 1,
        pipelined: false,
        flattened: true,
        unroll_factor: 1,
        fully_unrolled: false,
    };
    let la_inner = LoopAttrs {
        start: 0,
        end: 4,
        step: 1,
        pipelined: false,
        flattened: false,
        unroll_factor: 1,
        fully_unrolled: false,
    };
    let lo = g.insert_node(NodeKind::Loop(la_outer), None);
    let li = g.insert_node(NodeKind::Loop(la_inner), Some(lo));
    let add = g.insert_node(NodeKind::Op(int_attrs(OpKind::Add, 8)), Some(li));
    g.edges.push(DataEdge {
        producer: Producer::Input(0),
        consumer: add,
        slot: 0,
    });
    g.edges.push(DataEdge {
        producer: Producer::Node(li),
        consumer: add,
        slot: 1,
    });
    g.recompute_outputs();
    assert!(validate(&g).is_valid());
    let basic = schedule(&g, &ScheduleStrategy::Basic).unwrap();
    let opt = schedule(&g, &ScheduleStrategy::optimized()).unwrap();
    assert!(opt.latency.unwrap() < basic.latency.unwrap());
    check_equivalence(&g, 60, 21);
}

#[test]
fn partial_unroll_with_carried_dep_is_equivalent() {
    // trip 6, unroll factor 3, dep distance 2: exercises the cross-replica
    // dep rewrite.
    let mut g = ComputationGraph::new(vec![PrimaryInput {
        name: "x".into(),
        width: 8,
        dtype: DType::Int,
    }]);
    let la = LoopAttrs {
        start: 0,
        end: 6,
        step: 1,
        pipelined: false,
        flattened: false,
        unroll_factor: 3,
        fully_unrolled: false,
    };
    let l = g.insert_node(NodeKind::Loop(la), None);
    let add = g.insert_node(NodeKind::Op(int_attrs(OpKind::Add, 8)), Some(l));
    g.edges.push(DataEdge {
        producer: Producer::Input(0),
        consumer: add,
        slot: 0,
    });
    g.edges.push(DataEdge {
        producer: Producer::Input(0),
        consumer: add,
        slot: 1,
    });
    let dep = g.insert_node(
        NodeKind::Dep {
            distance: 2,
            source: add,
        },
        Some(l),
    );
    for e in &mut g.edges {
        if e.consumer == add && e.slot == 1 {
            e.producer = Producer::Node(dep);
        }
    }
    g.recompute_outputs();
    assert!(validate(&g).is_valid());
    check_equivalence(&g, 120, 31);
}

#[test]
fn interpret_examples_from_contract() {
    // ADD width 4 wrap: 9 + 9 -> 2 ; signed saturate: 7 + 7 -> 7.
    let mut g = ComputationGraph::new(vec![
        PrimaryInput {
            name: "a".into(),
            width: 4,
            dtype: DType::Int,
        },
        PrimaryInput {
            name: "b".into(),
            width: 4,
            dtype: DType::Int,
        },
    ]);
    let add = g.insert_node(NodeKind::Op(int_attrs(OpKind::Add, 4)), None);
    g.edges.push(DataEdge {
        producer: Producer::Input(0),
        consumer: add,
        slot: 0,
    });
    g.edges.push(DataEdge {
        producer: Producer::Input(1),
        consumer: add,
        slot: 1,
    });
    g.recompute_outputs();
    let mut inputs = BTreeMap::new();
    inputs.insert("a".to_string(), 9u64);
    inputs.insert("b".to_string(), 9u64);
    assert_eq!(interpret(&g, &inputs).unwrap()["out0"], 2);
}
