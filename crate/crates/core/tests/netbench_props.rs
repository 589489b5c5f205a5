use nas_core::netbench::*;
use nas_core::space::*;
use nas_core::tape::Tape;
use nas_core::tensor::Matrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_dataset(dims: &[(&str, usize)], rows: usize, outputs: usize, seed: u64) -> TabularDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = |r: usize, c: usize| Matrix::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect());
    let groups = dims.iter().map(|(n, d)| (n.to_string(), m(rows, *d))).collect();
    let output = m(rows, outputs);
    TabularDataset { name: "t".into(), task: Task::Regression, groups, output, train_rows: rows }
}

/// Mean squared error of the program over all training rows, no dropout.
fn loss_of(program: &TensorProgram, store: &ParamStore, ds: &TabularDataset) -> f64 {
    training_loss(program, store, ds).unwrap()
}

/// Analytic gradient of the same loss, flattened block by block (w then b).
fn analytic(program: &TensorProgram, store: &ParamStore, ds: &TabularDataset) -> Vec<f64> {
    let mut tape = Tape::new();
    let pv = store.on_tape(&mut tape);
    let xs: Vec<_> = program.inputs.iter().map(|(n, _)| tape.constant(ds.group(n).unwrap().clone())).collect();
    let out = program.forward(&mut tape, &pv, &xs, None);
    let y = tape.constant(ds.output.clone());
    let d = tape.sub(out, y);
    let sq = tape.square(d);
    let l = tape.mean(sq);
    let g = tape.backward(l);
    let mut flat = Vec::new();
    for (k, &(w, b)) in pv.iter().enumerate() {
        let (wm, bm) = &store.blocks[k];
        flat.extend(g.get(w).map(|m| m.data.clone()).unwrap_or(vec![0.0; wm.len()]));
        flat.extend(g.get(b).map(|m| m.data.clone()).unwrap_or(vec![0.0; bm.len()]));
    }
    flat
}

fn set_flat(store: &mut ParamStore, i: usize, v: f64) {
    let mut i = i;
    for (w, b) in store.blocks.iter_mut() {
        if i < w.len() {
            w.data[i] = v;
            return;
        }
        i -= w.len();
        if i < b.len() {
            b.data[i] = v;
            return;
        }
        i -= b.len();
    }
    panic!("index out of range");
}

fn check_fd(graph: &ArchGraph, ds: &TabularDataset, seed: u64) {
    let program = compile(graph, &ds.dims(), ds.task).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::init(&program, &mut rng);
    for (_, b) in store.blocks.iter_mut() {
        for v in b.data.iter_mut() {
            *v = rng.random_range(-0.3..0.3);
        }
    }
    let g = analytic(&program, &store, ds);
    let flat = store.flatten();
    assert_eq!(g.len(), flat.len());
    let h = 1e-5;
    let stride = (flat.len() / 60).max(1);
    for i in (0..flat.len()).step_by(stride) {
        let mut s = store.clone();
        set_flat(&mut s, i, flat[i] + h);
        let up = loss_of(&program, &s, ds);
        set_flat(&mut s, i, flat[i] - h);
        let down = loss_of(&program, &s, ds);
        let fd = (up - down) / (2.0 * h);
        let tol = 1e-6f64.max(1e-3 * fd.abs().max(g[i].abs()));
        assert!((fd - g[i]).abs() <= tol, "param {i}: fd {fd} analytic {}", g[i]);
    }
}

fn single_layer(op: LayerOp, input: usize) -> ArchGraph {
    let mut b = GraphBuilder::new();
    let x = b.input("x", input);
    let y = b.layer(op, vec![x], None);
    b.finish(y, HeadSpec { units: 1, activation: Activation::Linear })
}

#[test]
fn dense_gradients_for_every_activation() {
    let ds = random_dataset(&[("x", 5)], 7, 1, 1);
    for act in [Activation::Linear, Activation::Relu, Activation::Tanh, Activation::Sigmoid] {
        check_fd(&single_layer(LayerOp::dense(4, act), 5), &ds, 2);
    }
}

#[test]
fn conv_and_pool_gradients() {
    let ds = random_dataset(&[("x", 12)], 5, 1, 3);
    let mut b = GraphBuilder::new();
    let x = b.input("x", 12);
    let c = b.layer(LayerOp::Conv1D { filters: 3, kernel: 3, stride: 1 }, vec![x], None);
    let a = b.layer(LayerOp::Activation { function: Activation::Tanh }, vec![c], None);
    let p = b.layer(LayerOp::MaxPooling1D { size: 2 }, vec![a], None);
    let g = b.finish(p, HeadSpec { units: 1, activation: Activation::Linear });
    check_fd(&g, &ds, 4);
}

#[test]
fn concat_and_projected_add_gradients() {
    let ds = random_dataset(&[("a", 3), ("b", 4)], 6, 2, 5);
    let mut b = GraphBuilder::new();
    let a = b.input("a", 3);
    let c = b.input("b", 4);
    let da = b.layer(LayerOp::dense(5, Activation::Tanh), vec![a], None);
    let dc = b.layer(LayerOp::dense(2, Activation::Sigmoid), vec![c], None);
    let add = b.layer(LayerOp::Add, vec![da, dc], None);
    let cat = b.layer(LayerOp::Concatenate, vec![add, dc], None);
    let g = b.finish(cat, HeadSpec { units: 2, activation: Activation::Linear });
    check_fd(&g, &ds, 6);
}

#[test]
fn shared_block_gradient_is_sum_of_uses() {
    let ds = random_dataset(&[("a", 4), ("b", 4)], 6, 1, 7);
    let build = |shared: bool| {
        let mut b = GraphBuilder::new();
        let a = b.input("a", 4);
        let c = b.input("b", 4);
        let t1 = shared.then(|| "enc".to_string());
        let t2 = shared.then(|| "enc".to_string());
        let ea = b.layer(LayerOp::dense(3, Activation::Tanh), vec![a], t1);
        let eb = b.layer(LayerOp::dense(3, Activation::Tanh), vec![c], t2);
        let cat = b.layer(LayerOp::Concatenate, vec![ea, eb], None);
        b.finish(cat, HeadSpec { units: 1, activation: Activation::Linear })
    };
    let shared = compile(&build(true), &ds.dims(), Task::Regression).unwrap();
    let split = compile(&build(false), &ds.dims(), Task::Regression).unwrap();
    assert_eq!(shared.params.len() + 1, split.params.len());
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let s_store = ParamStore::init(&shared, &mut rng);
    // Unshared clone: both encoder blocks carry the shared weights.
    let mut u_store = ParamStore::init(&split, &mut rng);
    u_store.blocks[0] = s_store.blocks[0].clone();
    u_store.blocks[1] = s_store.blocks[0].clone();
    u_store.blocks[2] = s_store.blocks[1].clone();
    assert!((loss_of(&shared, &s_store, &ds) - loss_of(&split, &u_store, &ds)).abs() < 1e-12);
    let gs = analytic(&shared, &s_store, &ds);
    let gu = analytic(&split, &u_store, &ds);
    let enc = s_store.blocks[0].0.len() + s_store.blocks[0].1.len();
    for i in 0..enc {
        assert!((gs[i] - (gu[i] + gu[enc + i])).abs() < 1e-12);
    }
}

#[test]
fn training_reduces_loss_on_sampled_architectures() {
    let ds = generate_dataset("combo-mini", 11).unwrap();
    let space = build_space(builtin_space("combo_small").unwrap().with_input_dims(&ds.dims()).unwrap()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut checked = 0;
    while checked < 20 {
        let enc = sample_random_with(&space, &mut rng);
        let graph = decode(&space, &enc).unwrap();
        let program = compile(&graph, &ds.dims(), ds.task).unwrap();
        // Keep the suite quick: skip the very widest samples.
        if program.flops_per_sample() > 2e5 {
            continue;
        }
        let budget = |epochs| FidelityBudget { epochs, subset_fraction: 0.25, ..FidelityBudget::default() };
        let (_, s0) = train(&program, &ds, &budget(0), 5, &Clock::Wall).unwrap();
        let (_, s2) = train(&program, &ds, &budget(2), 5, &Clock::Wall).unwrap();
        let (l0, l2) = (training_loss(&program, &s0, &ds).unwrap(), training_loss(&program, &s2, &ds).unwrap());
        assert!(l2 < l0, "{:?}: loss {l0} -> {l2}", enc.0);
        checked += 1;
    }
}

#[test]
fn manifest_round_trip_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let ds = generate_dataset("uno-mini", 2).unwrap();
    let manifest = write_dataset(&ds, dir.path()).unwrap();
    let back = load_dataset(&manifest).unwrap();
    assert_eq!(back.dims(), ds.dims());
    assert_eq!(back.rows(), ds.rows());
    assert_eq!(back.train_rows, ds.train_rows);
    // Row mismatch in one group.
    let first = std::fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.extension().is_some_and(|x| x == "csv"))
        .unwrap();
    let text = std::fs::read_to_string(&first).unwrap();
    let cut: Vec<&str> = text.lines().collect();
    std::fs::write(&first, cut[..cut.len() - 3].join("\n")).unwrap();
    assert!(load_dataset(&manifest).is_err());
}

#[test]
fn generator_is_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    write_dataset(&generate_dataset("combo-mini", 9).unwrap(), a.path()).unwrap();
    write_dataset(&generate_dataset("combo-mini", 9).unwrap(), b.path()).unwrap();
    let mut names: Vec<_> = std::fs::read_dir(a.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    for n in names {
        assert_eq!(std::fs::read(a.path().join(&n)).unwrap(), std::fs::read(b.path().join(&n)).unwrap());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn random_dense_stacks_have_correct_gradients(
        widths in prop::collection::vec(1usize..5, 1..3),
        input in 1usize..5,
        seed in any::<u64>(),
    ) {
        let ds = random_dataset(&[("x", input)], 4, 1, seed);
        let mut b = GraphBuilder::new();
        let mut h = b.input("x", input);
        for (i, &w) in widths.iter().enumerate() {
            let act = [Activation::Tanh, Activation::Sigmoid, Activation::Linear][i % 3];
            h = b.layer(LayerOp::dense(w, act), vec![h], None);
        }
        let g = b.finish(h, HeadSpec { units: 1, activation: Activation::Linear });
        check_fd(&g, &ds, seed ^ 1);
    }

    #[test]
    fn param_count_matches_store(seed in any::<u64>()) {
        let ds = generate_dataset("combo-mini", 1).unwrap();
        let space = build_space(builtin_space("combo_small").unwrap().with_input_dims(&ds.dims()).unwrap()).unwrap();
        let enc = sample_random(&space, seed);
        let program = compile(&decode(&space, &enc).unwrap(), &ds.dims(), ds.task).unwrap();
        let store = ParamStore::init(&program, &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(count_params(&program), store.flatten().len());
    }
}
