//! Finite-difference checks of every differentiable op and of the composed
//! blocks, plus algebraic sanity of the matrix kernel.

mod common;

use common::{off_zero_matrix, project, random_matrix, rng, tiny_dataset};
use ncl::fusion::{
    fuse_query, init_fusion, masked_objective, nce_per_sample, SoftLabelVector, View,
};
use ncl::model::Model;
use ncl::numerics::{
    grad_check, init_mlp, mlp_forward, GradCheckOptions, GradCheckReport, Matrix, OpKind,
    ParamGroup, ParamStore, Tape, Var,
};
use ncl::run::pipeline_grad_check;
use ncl::synth::TripletSample;
use ncl::wcb::{compensate, init_wcb};

fn check<F>(store: &ParamStore, tol: f64, f: F) -> GradCheckReport
where
    F: Fn(&mut Tape, &ParamStore) -> ncl::Result<Var>,
{
    let opts = GradCheckOptions {
        tol,
        ..Default::default()
    };
    let report = grad_check(store, &opts, f).unwrap();
    assert!(report.passed, "{report:#?}");
    assert!(report.max_rel_error <= tol);
    report
}

fn store_of(entries: &[(&str, Matrix)]) -> ParamStore {
    let mut s = ParamStore::new();
    for (name, m) in entries {
        s.insert(*name, ParamGroup::Other, m.clone());
    }
    s
}

#[test]
fn matmul_4x5_by_5x2() {
    let mut r = rng(1);
    let store = store_of(&[
        ("a", random_matrix(&mut r, 4, 5)),
        ("b", random_matrix(&mut r, 5, 2)),
    ]);
    check(&store, 1e-6, |t, s| {
        let (a, b) = (s.var(t, "a")?, s.var(t, "b")?);
        let y = t.matmul(a, b)?;
        Ok(project(t, y, 9))
    });
}

#[test]
fn elementwise_and_bias_ops() {
    let mut r = rng(2);
    let store = store_of(&[
        ("x", off_zero_matrix(&mut r, 3, 4)),
        ("y", random_matrix(&mut r, 3, 4)),
        ("bias", random_matrix(&mut r, 1, 4)),
    ]);
    check(&store, 1e-6, |t, s| {
        let (x, y, b) = (s.var(t, "x")?, s.var(t, "y")?, s.var(t, "bias")?);
        let sum = t.add(x, y)?;
        let prod = t.mul(sum, x)?;
        let biased = t.add_bias(prod, b)?;
        let scaled = t.scale(biased, -0.7)?;
        Ok(project(t, scaled, 3))
    });
    check(&store, 1e-6, |t, s| {
        let x = s.var(t, "x")?;
        let y = t.relu(x)?;
        Ok(project(t, y, 4))
    });
}

#[test]
fn row_ops() {
    let mut r = rng(3);
    let store = store_of(&[
        ("x", random_matrix(&mut r, 5, 3)),
        ("z", random_matrix(&mut r, 5, 2)),
    ]);
    check(&store, 1e-6, |t, s| {
        let x = s.var(t, "x")?;
        let pooled = t.maxpool_rows(x)?;
        Ok(project(t, pooled, 5))
    });
    check(&store, 1e-6, |t, s| {
        let x = s.var(t, "x")?;
        let w = t.scale_rows(x, vec![0.1, 0.5, 0.0, 0.3, 0.1])?;
        Ok(project(t, w, 6))
    });
    check(&store, 1e-6, |t, s| {
        let (x, z) = (s.var(t, "x")?, s.var(t, "z")?);
        let c = t.concat_cols(x, z)?;
        let picked = t.select_rows(c, vec![4, 0, 2])?;
        Ok(project(t, picked, 7))
    });
    check(&store, 1e-6, |t, s| {
        let x = s.var(t, "x")?;
        let a = t.select_rows(x, vec![1])?;
        let b = t.select_rows(x, vec![3])?;
        let stacked = t.stack_rows(&[a, b, a])?;
        Ok(project(t, stacked, 8))
    });
}

#[test]
fn similarity_and_loss_ops() {
    let mut r = rng(4);
    let store = store_of(&[
        ("q", random_matrix(&mut r, 4, 6)),
        ("k", random_matrix(&mut r, 4, 6)),
    ]);
    check(&store, 1e-6, |t, s| {
        let (q, k) = (s.var(t, "q")?, s.var(t, "k")?);
        let sims = t.cosine_matrix(q, k)?;
        Ok(project(t, sims, 10))
    });
    check(&store, 1e-6, |t, s| {
        let (q, k) = (s.var(t, "q")?, s.var(t, "k")?);
        let sims = t.cosine_matrix(q, k)?;
        let l = t.nce_rows(sims, 0.07)?;
        t.masked_mean(l, vec![1.0, 0.0, 1.0, 1.0])
    });
}

#[test]
fn mlp_block() {
    let mut store = ParamStore::new();
    init_mlp(&mut store, "m", 6, 5, 4, ParamGroup::Wcb, &mut rng(5));
    let input = random_matrix(&mut rng(6), 3, 6);
    check(&store, 1e-5, |t, s| {
        let x = t.leaf(input.clone());
        let y = mlp_forward(t, x, s, "m")?;
        Ok(project(t, y, 11))
    });
}

#[test]
fn compensation_block() {
    let ds = tiny_dataset(3, 0.0, 2);
    let mut store = ParamStore::new();
    init_wcb(&mut store, 8, &mut rng(7));
    for bundle in [&ds.samples[0].mod_text, &ds.samples[1].ref_image] {
        check(&store, 1e-5, |t, s| {
            let v = compensate(t, bundle, s)?;
            Ok(project(t, v, 12))
        });
    }
}

#[test]
fn fusion_block() {
    let mut store = ParamStore::new();
    init_fusion(&mut store, 5, &mut rng(8));
    let (text, image) = (
        random_matrix(&mut rng(9), 4, 5),
        random_matrix(&mut rng(10), 4, 5),
    );
    check(&store, 1e-5, |t, s| {
        let (a, b) = (t.leaf(text.clone()), t.leaf(image.clone()));
        let q = fuse_query(t, a, b, s, View::Wcb)?;
        Ok(project(t, q, 13))
    });
}

#[test]
fn full_objective() {
    let r = pipeline_grad_check(3, None).unwrap();
    assert!(r.passed && r.max_rel_error <= 1e-5, "{r:#?}");

    // Same objective assembled by hand, on a noisy batch of six.
    let ds = tiny_dataset(6, 0.5, 4);
    let samples: Vec<&TripletSample> = ds.samples.iter().collect();
    let model = Model::init(8, 4);
    let labels = SoftLabelVector(vec![true, false, true, true, false, true]);
    check(&model.store, 1e-5, |t, s| {
        let f = Model::forward_with(s, t, &samples, true)?;
        let l = nce_per_sample(t, f.query, f.target, 0.07)?;
        let (q, k) = f.wcb.unwrap();
        let lw = nce_per_sample(t, q, k, 0.07)?;
        masked_objective(t, l, Some(lw), &labels)
    });
}

#[test]
fn injected_faults_are_named() {
    for kind in [
        OpKind::MatMul,
        OpKind::Relu,
        OpKind::CosineMatrix,
        OpKind::NceRows,
        OpKind::MaxPoolRows,
    ] {
        let r = pipeline_grad_check(0, Some(kind)).unwrap();
        assert!(!r.passed, "{kind:?} fault went unnoticed");
        assert_eq!(r.offending_op, Some(kind));
    }
}

#[test]
fn matmul_is_associative() {
    let mut r = rng(11);
    let (a, b, c) = (
        random_matrix(&mut r, 3, 4),
        random_matrix(&mut r, 4, 5),
        random_matrix(&mut r, 5, 2),
    );
    let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
    let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
    assert!(left.sub(&right).unwrap().max_abs() < 1e-12);
}

#[test]
fn gradients_are_linear_in_the_objective() {
    let mut r = rng(12);
    let x = off_zero_matrix(&mut r, 3, 4);
    let w = random_matrix(&mut r, 4, 2);
    let grad = |alpha: f64, beta: f64| {
        let mut t = Tape::new();
        let xv = t.leaf(x.clone());
        let wv = t.leaf(w.clone());
        let h = t.matmul(xv, wv).unwrap();
        let f = project(&mut t, h, 1);
        let hr = t.relu(h).unwrap();
        let g = project(&mut t, hr, 2);
        let fa = t.scale(f, alpha).unwrap();
        let gb = t.scale(g, beta).unwrap();
        let total = t.add(fa, gb).unwrap();
        t.backward(total).unwrap().wrt(wv).clone()
    };
    let combined = grad(2.0, -3.0);
    let separate = grad(1.0, 0.0)
        .scale(2.0)
        .add(&grad(0.0, 1.0).scale(-3.0))
        .unwrap();
    assert!(combined.sub(&separate).unwrap().max_abs() < 1e-12);
}
