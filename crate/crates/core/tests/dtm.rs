use ndarray::Array2;
use odisar_core::dtm::{
    load_checkpoint, loss_forecast, loss_recon, save_checkpoint, train, DtModel, Mode, ModelConfig,
    TrainConfig,
};
use odisar_core::rng::stream;
use odisar_core::timeseries::{FeatureSchema, Matrix, Normalizer, WindowPair};
use rand_distr::{Distribution, StandardNormal};

fn tiny(dropout: f64) -> ModelConfig {
    ModelConfig {
        d_model: 8,
        n_heads: 2,
        d_ff: 16,
        dropout,
        n_encoder_layers: 2,
        n_decoder_layers: 2,
        w: 4,
        h: 2,
        d_features: 2,
    }
}

fn randn(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = stream(seed, "test-data", &[]);
    Array2::from_shape_fn((rows, cols), |_| StandardNormal.sample(&mut rng))
}

/// Which objective the finite-difference oracle evaluates.
#[derive(Clone, Copy)]
enum Objective {
    /// `L_f(yhat(theta)) + L_r(ytilde(theta), yhat(theta))`
    Total,
    /// `L_f(yhat(theta)) + L_r(ytilde(theta), yhat_0)`, yhat_0 frozen at theta_0
    TotalDetached,
    Forecast,
    Recon,
}

fn objective(model: &DtModel, x: &Matrix, y: &Matrix, frozen: &Matrix, which: Objective) -> f64 {
    let mut rng = stream(99, "mask", &[]);
    let out = model.forward(x, Mode::Train(&mut rng)).unwrap();
    let lf = loss_forecast(&out.forecast, y).unwrap();
    match which {
        Objective::Total => lf + loss_recon(&out.recon, &out.forecast).unwrap(),
        Objective::TotalDetached => lf + loss_recon(&out.recon, frozen).unwrap(),
        Objective::Forecast => lf,
        Objective::Recon => loss_recon(&out.recon, &out.forecast).unwrap(),
    }
}

/// Central differences over every scalar parameter; returns per-tensor max
/// relative error.
fn fd_gradient(
    model: &DtModel,
    x: &Matrix,
    y: &Matrix,
    which: Objective,
) -> Vec<(String, Vec<f64>)> {
    let mut rng = stream(99, "mask", &[]);
    let frozen = model.forward(x, Mode::Train(&mut rng)).unwrap().forecast;
    let eps = 1e-6;
    let names: Vec<(String, usize)> = model
        .named_tensors()
        .into_iter()
        .map(|(n, t)| (n, t.len()))
        .collect();
    let mut out = Vec::new();
    for (ti, (name, len)) in names.into_iter().enumerate() {
        let mut grads = Vec::with_capacity(len);
        for k in 0..len {
            let mut plus = model.clone();
            plus.tensors_mut()[ti].as_slice_mut().unwrap()[k] += eps;
            let mut minus = model.clone();
            minus.tensors_mut()[ti].as_slice_mut().unwrap()[k] -= eps;
            let fp = objective(&plus, x, y, &frozen, which);
            let fm = objective(&minus, x, y, &frozen, which);
            grads.push((fp - fm) / (2.0 * eps));
        }
        out.push((name, grads));
    }
    out
}

fn analytic(model: &DtModel, x: &Matrix, y: &Matrix, detach: bool) -> DtModel {
    let mut grads = model.zeros_like();
    let mut rng = stream(99, "mask", &[]);
    model
        .loss_and_grad(x, y, Some(&mut rng), detach, &mut grads)
        .unwrap();
    grads
}

fn assert_close(analytic: &DtModel, numeric: &[(String, Vec<f64>)]) {
    for ((name, a), (_, n)) in analytic.named_tensors().into_iter().zip(numeric) {
        for (av, nv) in a.iter().zip(n) {
            let err = (av - nv).abs();
            let scale = av.abs().max(nv.abs());
            assert!(
                err <= 1e-4 * scale + 1e-8,
                "{name}: analytic {av} vs numeric {nv}"
            );
        }
    }
}

#[test]
fn gradient_matches_finite_differences_literal_total() {
    let model = DtModel::new(tiny(0.0), 3).unwrap();
    let (x, y) = (randn(4, 2, 1), randn(2, 2, 2));
    let num = fd_gradient(&model, &x, &y, Objective::Total);
    assert_close(&analytic(&model, &x, &y, false), &num);
}

#[test]
fn gradient_matches_finite_differences_detached_with_dropout() {
    let model = DtModel::new(tiny(0.2), 4).unwrap();
    let (x, y) = (randn(4, 2, 3), randn(2, 2, 4));
    let num = fd_gradient(&model, &x, &y, Objective::TotalDetached);
    assert_close(&analytic(&model, &x, &y, true), &num);
}

#[test]
fn total_gradient_is_sum_of_parts() {
    let model = DtModel::new(tiny(0.0), 5).unwrap();
    let (x, y) = (randn(4, 2, 5), randn(2, 2, 6));
    let f = fd_gradient(&model, &x, &y, Objective::Forecast);
    let r = fd_gradient(&model, &x, &y, Objective::Recon);
    let summed: Vec<(String, Vec<f64>)> = f
        .into_iter()
        .zip(r)
        .map(|((n, a), (_, b))| (n, a.iter().zip(&b).map(|(p, q)| p + q).collect()))
        .collect();
    assert_close(&analytic(&model, &x, &y, false), &summed);
}

#[test]
fn eval_is_deterministic_and_mc_varies() {
    let model = DtModel::new(tiny(0.3), 1).unwrap();
    let x = randn(4, 2, 9);
    let a = model.forward(&x, Mode::Eval).unwrap();
    let b = model.forward(&x, Mode::Eval).unwrap();
    assert_eq!(a, b);
    let m1 = model
        .forward(&x, Mode::Mc(&mut stream(1, "mc", &[0])))
        .unwrap();
    let m2 = model
        .forward(&x, Mode::Mc(&mut stream(1, "mc", &[1])))
        .unwrap();
    assert_ne!(m1.forecast, m2.forecast);
}

#[test]
fn output_shapes_over_config_sweep() {
    for (d_model, n_heads, w, h, d) in [(8, 1, 3, 1, 1), (8, 4, 5, 7, 3), (12, 3, 2, 2, 5)] {
        let cfg = ModelConfig {
            d_model,
            n_heads,
            d_ff: 10,
            dropout: 0.1,
            n_encoder_layers: 1,
            n_decoder_layers: 2,
            w,
            h,
            d_features: d,
        };
        let model = DtModel::new(cfg, 0).unwrap();
        let out = model.forward(&randn(w, d, 0), Mode::Eval).unwrap();
        assert_eq!(out.forecast.dim(), (h, d));
        assert_eq!(out.recon.dim(), (h, d));
        assert!(model.forward(&randn(w + 1, d, 0), Mode::Eval).is_err());
    }
}

#[test]
fn config_validation() {
    let mut c = tiny(0.1);
    c.n_heads = 3;
    assert!(DtModel::new(c, 0).is_err());
    let mut c = tiny(1.0);
    c.dropout = 1.0;
    assert!(c.validate().is_err());
    assert_eq!(ModelConfig::vessel(60, 60, 5).dropout, 0.1);
    assert_eq!(ModelConfig::robot(60, 60, 5).dropout, 0.2);
}

#[test]
fn parameter_count_is_function_of_config() {
    let a = DtModel::new(tiny(0.1), 1).unwrap();
    let b = DtModel::new(tiny(0.1), 2).unwrap();
    assert_eq!(a.num_params(), b.num_params());
    assert_ne!(a, b);
}

/// Permuting features consistently (input rows of the input projection,
/// output columns of both heads) leaves the losses unchanged.
#[test]
fn feature_permutation_sanity() {
    let mut cfg = tiny(0.0);
    cfg.d_features = 3;
    let model = DtModel::new(cfg, 8).unwrap();
    let perm = [2usize, 0, 1];
    let mut permuted = model.clone();
    for (new, &old) in perm.iter().enumerate() {
        permuted
            .input
            .w
            .row_mut(new)
            .assign(&model.input.w.row(old));
        for (src, dst) in [
            (&model.forecast_head, &mut permuted.forecast_head),
            (&model.recon_out, &mut permuted.recon_out),
        ] {
            dst.w.column_mut(new).assign(&src.w.column(old));
            dst.b.column_mut(new).assign(&src.b.column(old));
        }
    }
    let (x, y) = (randn(4, 3, 11), randn(2, 3, 12));
    let px = Array2::from_shape_fn((4, 3), |(i, j)| x[[i, perm[j]]]);
    let py = Array2::from_shape_fn((2, 3), |(i, j)| y[[i, perm[j]]]);
    let a = model.loss(&x, &y, Mode::Eval).unwrap();
    let b = permuted.loss(&px, &py, Mode::Eval).unwrap();
    assert!((a.forecast - b.forecast).abs() < 1e-12);
    assert!((a.recon - b.recon).abs() < 1e-12);
}

fn constant_windows(n: usize, cfg: &ModelConfig) -> Vec<WindowPair> {
    (0..n)
        .map(|i| WindowPair {
            input: Array2::from_elem((cfg.w, cfg.d_features), 0.5),
            target: Array2::from_elem((cfg.h, cfg.d_features), 0.5),
            start_step: i,
            end_step: i + cfg.w + cfg.h - 1,
        })
        .collect()
}

#[test]
fn constant_windows_drive_forecast_loss_down() {
    let cfg = tiny(0.0);
    let model = DtModel::new(cfg.clone(), 2).unwrap();
    let ws = constant_windows(32, &cfg);
    let tc = TrainConfig {
        epochs: 50,
        learning_rate: 1e-2,
        seed: 1,
        ..TrainConfig::default()
    };
    let (_, hist) = train(model, &ws, &ws[..4], &tc).unwrap();
    assert_eq!(hist.len(), 50);
    assert!(
        hist.epochs.last().unwrap().val.forecast < 1e-3,
        "{:?}",
        hist.epochs.last()
    );
}

#[test]
fn training_is_deterministic() {
    let cfg = tiny(0.2);
    let ws: Vec<WindowPair> = (0..6)
        .map(|i| WindowPair {
            input: randn(4, 2, i),
            target: randn(2, 2, 100 + i),
            start_step: i as usize,
            end_step: i as usize + 5,
        })
        .collect();
    let tc = TrainConfig {
        epochs: 3,
        batch_size: 4,
        seed: 42,
        ..TrainConfig::default()
    };
    let (a, ha) = train(DtModel::new(cfg.clone(), 1).unwrap(), &ws, &ws[..2], &tc).unwrap();
    let (b, hb) = train(DtModel::new(cfg.clone(), 1).unwrap(), &ws, &ws[..2], &tc).unwrap();
    assert_eq!(a, b);
    assert_eq!(ha, hb);

    let one = TrainConfig { epochs: 1, ..tc };
    let (_, h1) = train(DtModel::new(cfg, 1).unwrap(), &ws[..2], &ws[..2], &one).unwrap();
    assert_eq!(h1.len(), 1);
}

#[test]
fn checkpoint_round_trip_and_errors() {
    let cfg = ModelConfig::vessel(6, 3, 5);
    let model = DtModel::new(cfg, 7).unwrap();
    let norm = Normalizer {
        mean: vec![0.1, 0.2, 0.3, 0.4, 0.5],
        std: vec![1.0, 2.0, 3.0, 4.0, 5.0],
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.json");
    save_checkpoint(&model, &FeatureSchema::vessel(), &norm, &path).unwrap();
    let ck = load_checkpoint(&path).unwrap();
    assert_eq!(ck.config().dropout, 0.1);
    assert_eq!(ck.normalizer, norm);
    let x = randn(6, 5, 3);
    assert_eq!(
        model.forward(&x, Mode::Eval).unwrap(),
        ck.model.forward(&x, Mode::Eval).unwrap()
    );

    let text = std::fs::read_to_string(&path).unwrap();
    std::fs::write(&path, &text[..text.len() / 2]).unwrap();
    let err = load_checkpoint(&path).unwrap_err().to_string();
    assert!(err.contains("expected format version 1"), "{err}");

    std::fs::write(
        &path,
        text.replacen("\"format_version\":1", "\"format_version\":9", 1),
    )
    .unwrap();
    let err = load_checkpoint(&path).unwrap_err().to_string();
    assert!(err.contains("expected 1, found 9"), "{err}");
}
