use super::*;
use crate::autodiff::finite_difference_check;
use crate::graph::{delete_edges, ring_graph, Edge};

fn small_spec(kind: ModelKind, n: usize) -> ModelSpec {
    let mut spec = ModelSpec::new(kind, n, 1.0).with_seed(7);
    spec.hidden = 8;
    if kind == ModelKind::Gopher {
        spec.augmented_dims = 2;
        spec.ode_steps_per_unit_time = 10;
    }
    spec
}

fn toy_graph() -> WeightedDigraph {
    WeightedDigraph::new(
        3,
        vec![
            Edge::from((0, 1, 1.5)),
            Edge::from((1, 2, 0.5)),
            Edge::from((2, 0, 1.0)),
            Edge::from((0, 2, 0.25)),
        ],
    )
    .unwrap()
}

/// Plain-loop two-layer Swish MLP on one row.
fn reference_mlp(store: &ParamStore, prefix: &str, x: &[f64]) -> Vec<f64> {
    let layer = |w: &DenseMatrix, b: &DenseMatrix, x: &[f64]| -> Vec<f64> {
        (0..w.cols())
            .map(|j| b[(0, j)] + (0..w.rows()).map(|i| x[i] * w[(i, j)]).sum::<f64>())
            .collect()
    };
    let g = |name: &str| store.get(&format!("{prefix}.{name}")).unwrap();
    let h: Vec<f64> = layer(g("w1"), g("b1"), x)
        .into_iter()
        .map(|v| v / (1.0 + (-v).exp()))
        .collect();
    layer(g("w2"), g("b2"), &h)
}

fn nll_value(model: &Model, graph: &WeightedDigraph, events: &[(f64, usize)]) -> Result<f64> {
    let mut tape = Tape::new();
    let loss = nll_var(model, &mut tape, graph, events)?;
    Ok(tape.value(loss)[(0, 0)])
}

fn nll_var(model: &Model, tape: &mut Tape, graph: &WeightedDigraph, events: &[(f64, usize)]) -> Result<Var> {
    let times: Vec<f64> = events.iter().map(|e| e.0).collect();
    let lp = model.log_probs(tape, graph, &times)?;
    let picked = tape.gather(lp, events.iter().enumerate().map(|(i, e)| (i, e.1)).collect())?;
    let total = tape.sum(picked);
    Ok(tape.scale(total, -1.0 / events.len() as f64))
}

fn check_gradients(mut model: Model, graph: &WeightedDigraph) -> f64 {
    let events = [(0.23, 1), (0.71, 2)];
    let mut tape = Tape::new();
    let loss = nll_var(&model, &mut tape, graph, &events).unwrap();
    tape.backward(loss, model.params_mut()).unwrap();
    let spec = model.spec.clone();
    let g = graph.clone();
    let report = finite_difference_check(
        model.params_mut(),
        |store| nll_value(&Model::from_parts(spec.clone(), store.clone())?, &g, &events),
        1e-5,
        None,
    )
    .unwrap();
    assert_eq!(report.checked, model.params().num_scalars());
    report.max_rel_err
}

#[test]
fn outputs_are_normalized() {
    let g = ring_graph(6, 2.0, 0.5).unwrap();
    for kind in ModelKind::ALL {
        let model = Model::new(small_spec(kind, 6)).unwrap();
        let out = model.predict(&g, &[0.0, 0.1, 0.5, 0.99, 1.7]).unwrap();
        assert_eq!(out.len(), 5);
        for p in out {
            assert!((p.as_slice().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn initial_readout_is_projection_of_initial_rows() {
    let g = toy_graph();
    let model = Model::new(small_spec(ModelKind::Gopher, 3)).unwrap();
    let got = model.predict(&g, &[0.0]).unwrap().remove(0);
    let z0 = model.params().get("z0").unwrap();
    let scores: Vec<f64> = (0..3)
        .map(|v| {
            let mut row = z0.row(v).to_vec();
            row.extend([0.0, 0.0]);
            reference_mlp(model.params(), "projection", &row)[0]
        })
        .collect();
    let m = scores.iter().cloned().fold(f64::MIN, f64::max);
    let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
    for (a, s) in got.as_slice().iter().zip(&scores) {
        assert!((a - (s - m).exp() / z).abs() < 1e-15);
    }
}

#[test]
fn predictions_are_exactly_equivariant() {
    let g = toy_graph();
    let perm = [2, 0, 1];
    let gp = g.permute(&perm).unwrap();
    let times = [0.0, 0.05, 0.3, 0.31, 0.9];
    for kind in ModelKind::ALL {
        let model = Model::new(small_spec(kind, 3)).unwrap();
        let mp = model.permuted(&perm).unwrap();
        let a = model.predict(&g, &times).unwrap();
        let b = mp.predict(&gp, &times).unwrap();
        for (pa, pb) in a.iter().zip(&b) {
            assert_eq!(&pa.permuted(&perm), pb, "{kind}");
        }
    }
}

#[test]
fn dynamics_are_one_hop_local() {
    let g = ring_graph(7, 1.0, 0.0001).unwrap();
    let g = delete_edges(&g, |e| e.weight < 0.5);
    let model = Model::new(small_spec(ModelKind::Gopher, 7)).unwrap();
    let z = model.encode_attributes(&g).unwrap();
    let base = model.dynamics(&g, &z, 0.4).unwrap();
    for u in 0..7 {
        let mut zp = z.clone();
        zp[(u, 0)] += 0.3;
        let moved = model.dynamics(&g, &zp, 0.4).unwrap();
        for v in 0..7 {
            let changed = moved.row(v) != base.row(v);
            let neighbour = u == v || g.edges().iter().any(|e| e.src == u && e.dst == v);
            assert_eq!(changed, neighbour, "u={u} v={v}");
        }
    }
}

#[test]
fn isolated_node_sees_only_itself() {
    let g = WeightedDigraph::new(3, vec![Edge::from((0, 1, 1.0))]).unwrap();
    let model = Model::new(small_spec(ModelKind::Gopher, 3)).unwrap();
    let z = model.encode_attributes(&g).unwrap();
    let out = model.dynamics(&g, &z, 0.2).unwrap();
    let mut x = z.row(2).to_vec();
    x.push(0.2);
    let want = reference_mlp(model.params(), "dynamics", &x);
    for (a, b) in out.row(2).iter().zip(want) {
        assert!((a - b).abs() < 1e-14);
    }
}

#[test]
fn naive_models_are_stateless() {
    let g = toy_graph();
    for kind in [ModelKind::NaiveGnn, ModelKind::NaiveMlp] {
        let model = Model::new(small_spec(kind, 3)).unwrap();
        let alone = model.predict(&g, &[0.4]).unwrap();
        let among = model.predict(&g, &[0.9, 0.4, 0.1]).unwrap();
        assert_eq!(alone[0], among[1]);
    }
}

#[test]
fn edge_free_model_ignores_edges() {
    let g = toy_graph();
    let bare = delete_edges(&g, |_| true);
    let model = Model::new(small_spec(ModelKind::NaiveMlp, 3)).unwrap();
    let times = [0.0, 0.5, 1.0];
    assert_eq!(model.predict(&g, &times).unwrap(), model.predict(&bare, &times).unwrap());
    let gnn = Model::new(small_spec(ModelKind::NaiveGnn, 3)).unwrap();
    assert_ne!(gnn.predict(&g, &times).unwrap(), gnn.predict(&bare, &times).unwrap());
}

#[test]
fn unsorted_queries_are_rejected_by_the_ode_model() {
    let model = Model::new(small_spec(ModelKind::Gopher, 3)).unwrap();
    assert!(model.predict(&toy_graph(), &[0.5, 0.2]).is_err());
    assert!(model.predict(&toy_graph(), &[-0.1]).is_err());
}

#[test]
fn zero_encoder_gives_uniform_start() {
    let g = toy_graph()
        .with_node_attrs(vec![vec![1.0, 2.0], vec![-3.0, 0.5], vec![0.0, 9.0]])
        .unwrap();
    let mut spec = small_spec(ModelKind::Gopher, 3);
    spec.attr_dim = Some(2);
    let mut model = Model::new(spec).unwrap();
    for name in ["encoder.w1", "encoder.w2"] {
        let w = model.params_mut().get_mut(name).unwrap();
        w.data_mut().iter_mut().for_each(|x| *x = 0.0);
    }
    let z0 = model.encode_attributes(&g).unwrap();
    assert_eq!(z0.row(0), z0.row(1));
    assert_eq!(z0.row(0), z0.row(2));
    assert_eq!(&z0.row(0)[6..], &[0.0, 0.0]);
    let p = model.predict(&g, &[0.0]).unwrap().remove(0);
    assert_eq!(p, ProbVector::uniform(3));
}

#[test]
fn attribute_width_is_checked() {
    let g = toy_graph().with_node_attrs(vec![vec![1.0]; 3]).unwrap();
    let mut spec = small_spec(ModelKind::Gopher, 3);
    spec.attr_dim = Some(2);
    let model = Model::new(spec).unwrap();
    assert!(model.predict(&g, &[0.0]).is_err());
    assert!(model.predict(&toy_graph(), &[0.0]).is_err());
}

#[test]
fn full_loss_gradients_match_finite_differences() {
    for kind in ModelKind::ALL {
        let err = check_gradients(Model::new(small_spec(kind, 3)).unwrap(), &toy_graph());
        assert!(err < 1e-4, "{kind}: {err}");
    }
}

#[test]
fn encoder_gradients_match_finite_differences() {
    let g = toy_graph()
        .with_node_attrs(vec![vec![1.0, 0.2], vec![-0.5, 0.5], vec![0.3, -1.0]])
        .unwrap();
    let mut spec = small_spec(ModelKind::Gopher, 3);
    spec.attr_dim = Some(2);
    let err = check_gradients(Model::new(spec).unwrap(), &g);
    assert!(err < 1e-4, "{err}");
}

#[test]
fn save_and_load_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let model = Model::new(small_spec(ModelKind::NaiveGnn, 3)).unwrap();
    model.save(dir.path()).unwrap();
    assert_eq!(Model::load(dir.path()).unwrap(), model);
    let wrong = ModelSpec { kind: ModelKind::NaiveMlp, ..model.spec().clone() };
    assert!(Model::from_parts(wrong, model.params().clone()).is_err());
}

#[test]
fn kind_names_round_trip() {
    for kind in ModelKind::ALL {
        assert_eq!(kind.as_str().parse::<ModelKind>().unwrap(), kind);
        assert_eq!(serde_json::to_string(&kind).unwrap(), format!("\"{kind}\""));
    }
}
