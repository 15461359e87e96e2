use std::collections::BTreeMap;

use autoshard::cost::ClusterSpec;
use autoshard::interp::{check_equivalence, execute_sharded, execute_single, random_inputs};
use autoshard::ir::{
    gen_transformer, gen_transformer_stack, gen_wide_classifier, trim_and_group, DType,
    GroupedGraph, OpKind, RawGraph, RawNode, TensorSpec, TransformerConfig,
};
use autoshard::patterns::{CollectiveKind, ShardSpec};
use autoshard::prune::{prune_graph, PruneResult};
use autoshard::rewrite::{rewrite_graph, ParallelGraph};
use autoshard::search::{
    derive_plan, pattern_routing, ModelPlan, PlanSpace, Region, SearchOptions,
};
use autoshard::Error;

fn replica(g: &GroupedGraph) -> BTreeMap<String, ShardSpec> {
    g.raw
        .weights()
        .map(|(n, _)| (n.name.clone(), ShardSpec::Replica))
        .collect()
}

fn rewrite(
    g: &GroupedGraph,
    prune: &PruneResult,
    plan: &BTreeMap<String, ShardSpec>,
    mesh: &ClusterSpec,
) -> ParallelGraph {
    let model = ModelPlan::route(g, prune, plan, mesh).unwrap();
    let pg = rewrite_graph(g, &model, mesh).unwrap();
    assert_eq!(pg.collective_count(), model.collective_count());
    pg
}

#[test]
fn row_split_matmul_sums_partials() {
    let act = |s: &[usize]| TensorSpec::new(s.to_vec(), DType::F64, false).unwrap();
    let raw = RawGraph::new(vec![
        RawNode::new("x", OpKind::Input, &[], act(&[4, 8])),
        RawNode::new("pre/MatMul", OpKind::MatMul, &["x"], act(&[4, 8]))
            .with_weight(TensorSpec::new(vec![8, 8], DType::F64, true).unwrap()),
        RawNode::new("fc/MatMul", OpKind::MatMul, &["pre/MatMul"], act(&[4, 6]))
            .with_weight(TensorSpec::new(vec![8, 6], DType::F64, true).unwrap()),
        RawNode::new("y", OpKind::Output, &["fc/MatMul"], act(&[4, 6])),
    ])
    .unwrap();
    let g = trim_and_group(&raw).unwrap();
    let mesh = ClusterSpec::new(1, 2);
    let prune = prune_graph(&g, 1).unwrap();
    let plan = BTreeMap::from([
        ("pre/MatMul".to_string(), ShardSpec::Split(1)),
        ("fc/MatMul".to_string(), ShardSpec::Split(0)),
    ]);
    let pg = rewrite(&g, &prune, &plan, &mesh);
    assert_eq!(pg.collective_count(), 1);
    let dev0 = &pg.devices[0];
    let fc = dev0.iter().find(|n| n.name == "fc/MatMul").unwrap();
    assert_eq!(fc.weight.as_ref().unwrap().shape, [4, 6]);
    let ar = dev0.iter().find(|n| n.op == OpKind::Collective).unwrap();
    assert_eq!(ar.inputs, ["fc/MatMul"]);
    assert_eq!(
        ar.collective.as_ref().unwrap().kind,
        CollectiveKind::AllReduceSum
    );
    let r = check_equivalence(&raw, &pg, 5, 1e-12, 3).unwrap();
    assert!(r.passed, "{r:?}");
}

#[test]
fn one_device_rewrite_is_isomorphic_and_exact() {
    let raw = gen_transformer_stack(1, 8, 2)
        .unwrap()
        .with_dtype(DType::F64);
    let g = trim_and_group(&raw).unwrap();
    let mesh = ClusterSpec::new(1, 1);
    let prune = prune_graph(&g, 2).unwrap();
    let pg = rewrite(&g, &prune, &replica(&g), &mesh);
    assert_eq!(pg.device_count(), 1);
    assert_eq!(pg.collective_count(), 0);
    assert_eq!(pg.devices[0].len(), raw.len());
    let inputs = random_inputs(&raw, 9);
    assert_eq!(
        execute_single(&raw, &inputs, 4).unwrap(),
        execute_sharded(&pg, &inputs, 4).unwrap()
    );
}

#[test]
fn all_replica_is_bit_exact() {
    let raw = gen_transformer_stack(2, 8, 2)
        .unwrap()
        .with_dtype(DType::F64);
    let g = trim_and_group(&raw).unwrap();
    let mesh = ClusterSpec::new(2, 2);
    let prune = prune_graph(&g, 2).unwrap();
    let pg = rewrite(&g, &prune, &replica(&g), &mesh);
    let r = check_equivalence(&raw, &pg, 3, 0.0, 1).unwrap();
    assert_eq!(r.worst, 0.0);
    assert!(!pg.gradients.buckets.is_empty());
}

#[test]
fn ffn_only_plan_has_one_allreduce_per_layer() {
    let raw = gen_transformer_stack(2, 8, 2)
        .unwrap()
        .with_dtype(DType::F64);
    let g = trim_and_group(&raw).unwrap();
    let mesh = ClusterSpec::new(1, 4);
    let prune = prune_graph(&g, 2).unwrap();
    let mut plan = replica(&g);
    for l in 0..2 {
        plan.insert(
            format!("encoder/layer_{l}/ffn/intermediate/MatMul"),
            ShardSpec::Split(1),
        );
        plan.insert(
            format!("encoder/layer_{l}/ffn/output/MatMul"),
            ShardSpec::Split(0),
        );
    }
    let pg = rewrite(&g, &prune, &plan, &mesh);
    let kinds: Vec<_> = pg.devices[0]
        .iter()
        .filter_map(|n| n.collective.as_ref().map(|c| c.kind))
        .collect();
    assert_eq!(kinds, [CollectiveKind::AllReduceSum; 2]);
    let r = check_equivalence(&raw, &pg, 10, 1e-10, 7).unwrap();
    assert!(r.passed, "{r:?}");
}

#[test]
fn dropping_an_allreduce_breaks_equivalence() {
    let raw = gen_transformer_stack(1, 8, 2)
        .unwrap()
        .with_dtype(DType::F64);
    let g = trim_and_group(&raw).unwrap();
    let mesh = ClusterSpec::new(1, 2);
    let prune = prune_graph(&g, 1).unwrap();
    let mut plan = replica(&g);
    plan.insert(
        "encoder/layer_0/ffn/intermediate/MatMul".into(),
        ShardSpec::Split(1),
    );
    plan.insert(
        "encoder/layer_0/ffn/output/MatMul".into(),
        ShardSpec::Split(0),
    );
    let mut pg = rewrite(&g, &prune, &plan, &mesh);
    for dev in &mut pg.devices {
        let at = dev
            .iter()
            .position(|n| {
                n.collective.as_ref().map(|c| c.kind) == Some(CollectiveKind::AllReduceSum)
            })
            .unwrap();
        let dropped = dev.remove(at);
        for n in dev.iter_mut() {
            for i in &mut n.inputs {
                if *i == dropped.name {
                    *i = dropped.inputs[0].clone();
                }
            }
        }
    }
    let r = check_equivalence(&raw, &pg, 3, 1e-10, 2).unwrap();
    assert!(!r.passed);
    assert!(r.worst > 1e-3, "{r:?}");
}

#[test]
fn mismatched_device_graphs_are_a_protocol_error() {
    let raw = gen_transformer_stack(1, 8, 2)
        .unwrap()
        .with_dtype(DType::F64);
    let g = trim_and_group(&raw).unwrap();
    let mesh = ClusterSpec::new(1, 2);
    let prune = prune_graph(&g, 1).unwrap();
    let mut plan = replica(&g);
    plan.insert(
        "encoder/layer_0/ffn/intermediate/MatMul".into(),
        ShardSpec::Split(1),
    );
    plan.insert(
        "encoder/layer_0/ffn/output/MatMul".into(),
        ShardSpec::Split(0),
    );
    let mut pg = rewrite(&g, &prune, &plan, &mesh);
    pg.devices[1].retain(|n| n.op != OpKind::Collective);
    let inputs = random_inputs(&raw, 1);
    assert!(matches!(
        execute_sharded(&pg, &inputs, 1),
        Err(Error::Protocol(_))
    ));
}

#[test]
fn indivisible_split_is_rejected() {
    let raw = gen_transformer_stack(1, 8, 2).unwrap();
    let g = trim_and_group(&raw).unwrap();
    let prune = prune_graph(&g, 2).unwrap();
    let mesh2 = ClusterSpec::new(1, 2);
    let mut model = ModelPlan::route(&g, &prune, &replica(&g), &mesh2).unwrap();
    // Force a layout the router never produces for three devices.
    let mesh3 = ClusterSpec::new(1, 3);
    for r in &mut model.routed {
        for n in &mut r.nodes {
            if n.node == "encoder/layer_0/ffn/output/MatMul" {
                n.weight = Some(ShardSpec::Split(0));
            }
        }
    }
    assert!(matches!(
        rewrite_graph(&g, &model, &mesh3),
        Err(Error::IndivisibleShard { .. })
    ));
}

#[test]
fn parallel_graph_round_trips_through_json() {
    let raw = gen_transformer(&TransformerConfig::new(2, 8, 2)).unwrap();
    let g = trim_and_group(&raw).unwrap();
    let mesh = ClusterSpec::new(2, 2);
    let report = derive_plan(&g, &mesh, 2, &SearchOptions::default()).unwrap();
    let pg = rewrite_graph(&g, &report.model, &mesh).unwrap();
    let json = pg.to_json();
    let back = ParallelGraph::parse(json.as_bytes()).unwrap();
    assert_eq!(back, pg);
    assert_eq!(back.to_json(), json);
    let doc: serde_json::Value = serde_json::from_str(&json).unwrap();
    assert_eq!(doc["version"], 2);
    let coll = doc["nodes"]
        .as_array()
        .unwrap()
        .iter()
        .find(|n| n["op"] == "collective");
    if let Some(c) = coll {
        assert!(c["collective"]["kind"].is_string());
        assert_eq!(
            c["collective"]["participants"],
            serde_json::json!([0, 1, 2, 3])
        );
    }
    // Auxiliary nodes are restored on every device.
    let aux = raw
        .nodes()
        .iter()
        .filter(|n| n.op == OpKind::Auxiliary)
        .count();
    assert!(aux > 0);
    for dev in &pg.devices {
        assert_eq!(
            dev.iter().filter(|n| n.op == OpKind::Auxiliary).count(),
            aux
        );
    }
    assert!(pg
        .provenance()
        .contains_key("encoder/layer_1/ffn/output/MatMul"));
}

/// Every valid candidate of every search unit, with the other units replicated.
fn every_unit_plan(
    g: &GroupedGraph,
    prune: &PruneResult,
    d: usize,
    mesh: &ClusterSpec,
) -> Vec<BTreeMap<String, ShardSpec>> {
    let mut plans = Vec::new();
    for unit in &prune.subgraphs {
        let regions: Vec<Region> = unit
            .instances
            .iter()
            .map(|i| Region::new(g, &i.nodes, d))
            .collect();
        let space = PlanSpace::new(regions[0].weight_names().iter().map(|w| {
            (
                w.to_string(),
                g.raw.get(w).unwrap().weight.as_ref().unwrap().rank(),
            )
        }));
        for index in 0..space.count as u64 {
            let cand = space.decode(index);
            if pattern_routing(&regions[0], &cand.assignments, mesh).is_err() {
                continue;
            }
            let mut plan = replica(g);
            for r in &regions {
                for (w, s) in r.weight_names().iter().zip(&cand.assignments) {
                    plan.insert(w.to_string(), *s);
                }
            }
            plans.push(plan);
        }
    }
    plans
}

fn check_all(raw: &RawGraph, meshes: &[(usize, usize)]) -> usize {
    let g = trim_and_group(raw).unwrap();
    let prune = prune_graph(&g, 2).unwrap();
    let mut checked = 0;
    for &(m, n) in meshes {
        let mesh = ClusterSpec::new(m, n);
        for plan in every_unit_plan(&g, &prune, m * n, &mesh) {
            let pg = rewrite(&g, &prune, &plan, &mesh);
            let r = check_equivalence(raw, &pg, 2, 1e-10, checked as u64).unwrap();
            assert!(r.passed, "{plan:?}: {r:?}");
            checked += 1;
        }
    }
    checked
}

#[test]
fn every_valid_transformer_plan_is_equivalent() {
    let raw = gen_transformer_stack(2, 8, 2)
        .unwrap()
        .with_dtype(DType::F64);
    assert!(check_all(&raw, &[(1, 2), (2, 2)]) > 10);
}

#[test]
fn every_valid_classifier_plan_is_equivalent() {
    let raw = gen_wide_classifier(64, 16).unwrap().with_dtype(DType::F64);
    assert!(check_all(&raw, &[(1, 2), (2, 2)]) > 4);
}
