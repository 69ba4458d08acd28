use super::*;
use crate::tensor::testutil::{max_rel_err, rand_vec};
use num_complex::Complex64;

fn small_cfg() -> MambaNetConfig {
    let bb = BasebandConfig::with_subcarriers(16);
    MambaNetConfig {
        c_spread: 4,
        ..MambaNetConfig::for_baseband(&bb)
    }
}

fn random_ls(cfg: &MambaNetConfig, seed: u64) -> PilotLsGrid {
    let v = rand_vec(2 * cfg.seq_len(), seed);
    let vals = v.chunks(2).map(|c| Complex64::new(c[0], c[1])).collect();
    PilotLsGrid::new(cfg.pilots_per_symbol, cfg.n_pilot, vals).unwrap()
}

fn zeroed(p: &mut MambaNetParams, ids: &[usize]) {
    for &id in ids {
        p.set.data_mut(id).iter_mut().for_each(|v| *v = 0.0);
    }
}

#[test]
fn default_sequence_length() {
    let cfg = MambaNetConfig::for_baseband(&BasebandConfig::default());
    assert_eq!(cfg.seq_len(), 228);
    assert_eq!(cfg.n_heads, 4);
    cfg.validate().unwrap();
}

#[test]
fn config_validation_names_key() {
    let cfg = MambaNetConfig {
        n_heads: 5,
        ..small_cfg()
    };
    match cfg.validate() {
        Err(Error::Config { key, .. }) => assert_eq!(key, "model.n_heads"),
        other => panic!("unexpected {other:?}"),
    }
    let cfg = MambaNetConfig {
        c_spread: 1,
        ..small_cfg()
    };
    assert!(cfg.validate().is_err());
}

#[test]
fn tokenize_all_ones() {
    let cfg = MambaNetConfig::for_baseband(&BasebandConfig::default());
    let ls = PilotLsGrid::new(57, 4, vec![Complex64::new(1.0, 0.0); 228]).unwrap();
    let t = tokenize(&ls, &cfg).unwrap();
    assert_eq!(t.shape(), &[228, 2]);
    for row in t.data().chunks(2) {
        assert_eq!(row, &[1.0, 0.0]);
    }
}

#[test]
fn tokenize_roundtrip_both_orders() {
    for order in [TokenOrder::PilotSymbolMajor, TokenOrder::SubcarrierMajor] {
        let cfg = MambaNetConfig {
            token_order: order,
            ..small_cfg()
        };
        let ls = random_ls(&cfg, 3);
        let back = detokenize(&tokenize(&ls, &cfg).unwrap(), &cfg).unwrap();
        assert_eq!(back, ls);
    }
}

#[test]
fn pilot_symbol_major_layout() {
    let cfg = small_cfg();
    let ls = random_ls(&cfg, 4);
    let t = tokenize(&ls, &cfg).unwrap();
    let d = t.data();
    // token 5 is subcarrier 1 of pilot symbol 1
    assert_eq!(d[10], ls.get(1, 1).re);
    assert_eq!(d[11], ls.get(1, 1).im);
}

#[test]
fn tokenize_rejects_wrong_grid() {
    let cfg = small_cfg();
    let ls = PilotLsGrid::new(3, 4, vec![Complex64::new(0.0, 0.0); 12]).unwrap();
    assert!(tokenize(&ls, &cfg).is_err());
}

#[test]
fn map_rows_inverts_token_order() {
    for order in [TokenOrder::PilotSymbolMajor, TokenOrder::SubcarrierMajor] {
        let cfg = MambaNetConfig {
            token_order: order,
            ..small_cfg()
        };
        let ls = random_ls(&cfg, 5);
        let t = tokenize(&ls, &cfg).unwrap();
        let map = t.gather_rows(&map_rows(&cfg)).unwrap();
        let (p, n) = (cfg.pilots_per_symbol, cfg.n_pilot);
        for i in 0..p {
            for j in 0..n {
                let r = i * n + j;
                assert_eq!(map.data()[2 * r], ls.get(i, j).re);
            }
        }
    }
}

#[test]
fn attention_rows_are_stochastic() {
    let cfg = MambaNetConfig::for_baseband(&BasebandConfig::default());
    let p = MambaNetParams::init(&cfg, 1).unwrap();
    let ls = random_ls(&cfg, 2);
    let trace = attention_block(&tokenize(&ls, &cfg).unwrap(), &p, &p.set.bind_frozen()).unwrap();
    assert_eq!(trace.weights.len(), 4);
    for w in &trace.weights {
        assert_eq!(w.shape(), &[57, 57]);
        for row in w.data().chunks(57) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
    assert_eq!(trace.output.shape(), &[228, 2]);
}

#[test]
fn attention_zero_input_zero_output() {
    let cfg = small_cfg();
    let p = MambaNetParams::init(&cfg, 1).unwrap();
    let x = Tensor::zeros(&[cfg.seq_len(), 2]).unwrap();
    let out = attention_block(&x, &p, &p.set.bind_frozen()).unwrap().output;
    assert!(out.data().iter().all(|&v| v == 0.0));
}

#[test]
fn uniform_attention_averages_values() {
    let cfg = small_cfg();
    let mut p = MambaNetParams::init(&cfg, 7).unwrap();
    let l = cfg.seq_len();
    // Every K row gets the same weights so all keys coincide.
    let w = p.set.data_mut(p.layout.attn_in_w);
    let first: Vec<f64> = w[l * l..l * l + l].to_vec();
    for r in l..2 * l {
        w[r * l..(r + 1) * l].copy_from_slice(&first);
    }
    let x = Tensor::new(&[l, 2], rand_vec(2 * l, 8)).unwrap();
    let bound = p.set.bind_frozen();
    let trace = attention_block(&x, &p, &bound).unwrap();
    let d = l / cfg.n_heads;
    let qkv = bound[p.layout.attn_in_w].matmul(&x).unwrap();
    for (h, a) in trace.weights.iter().enumerate() {
        assert!(a.data().iter().all(|&v| (v - 1.0 / d as f64).abs() < 1e-14));
        let v = qkv.slice_rows(2 * l + h * d, d).unwrap();
        let head = a.matmul(&v).unwrap();
        for c in 0..2 {
            let mean: f64 = v.data().iter().skip(c).step_by(2).sum::<f64>() / d as f64;
            for r in 0..d {
                assert!((head.data()[2 * r + c] - mean).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn gates_at_zero_input() {
    let cfg = MambaNetConfig::for_baseband(&BasebandConfig::default());
    let p = MambaNetParams::init(&cfg, 2).unwrap();
    let s = mamba_gates(&Tensor::zeros(&[228, 2]).unwrap(), &p).unwrap();
    assert_eq!((s.len, s.channels), (228, 24));
    assert!(s.a.iter().all(|&v| v == 0.5));
    assert!(s.b.iter().all(|&v| v == 0.0));
    assert!(s.g.iter().all(|&v| v == 0.0));
}

#[test]
fn gates_a_in_open_unit_interval() {
    let cfg = small_cfg();
    let p = MambaNetParams::init(&cfg, 3).unwrap();
    let x = Tensor::new(&[16, 2], rand_vec(32, 4).iter().map(|v| 50.0 * v).collect()).unwrap();
    let s = mamba_gates(&x, &p).unwrap();
    assert!(s.a.iter().all(|&v| v > 0.0 && v < 1.0));
}

#[test]
fn closed_gate_leaves_output_bias() {
    let cfg = small_cfg();
    let mut p = MambaNetParams::init(&cfg, 5).unwrap();
    let gate = [p.layout.g_w, p.layout.g_b];
    zeroed(&mut p, &gate);
    p.set.data_mut(p.layout.out_b).copy_from_slice(&[0.3, -0.7]);
    let l = cfg.seq_len();
    let x = Tensor::new(&[l, 2], rand_vec(2 * l, 6)).unwrap();
    let bound = p.set.bind_frozen();
    let y = mamba_block(&x, &p, &bound).unwrap();
    let shifted = x.add_bias_cols(&bound[p.layout.out_b]).unwrap();
    let expect = shifted
        .layer_norm(&bound[p.layout.ln2_w], &bound[p.layout.ln2_b], cfg.eps)
        .unwrap();
    assert_eq!(y.shape(), &[l, 2]);
    assert!(max_rel_err(y.data(), expect.data(), 1.0) < 1e-14);
}

#[test]
fn mamba_block_default_shape() {
    let cfg = MambaNetConfig::for_baseband(&BasebandConfig::default());
    let p = MambaNetParams::init(&cfg, 5).unwrap();
    let x = Tensor::new(&[228, 2], rand_vec(456, 1)).unwrap();
    let y = mamba_block(&x, &p, &p.set.bind_frozen()).unwrap();
    assert_eq!(y.shape(), &[228, 2]);
}

#[test]
fn scan_modes_give_same_block_output() {
    let cfg = small_cfg();
    let p = MambaNetParams::init(&cfg, 5).unwrap();
    let q = MambaNetParams {
        cfg: MambaNetConfig {
            scan_mode: ScanMode::Parallel,
            ..cfg.clone()
        },
        ..p.clone()
    };
    let x = Tensor::new(&[16, 2], rand_vec(32, 1)).unwrap();
    let a = mamba_block(&x, &p, &p.set.bind_frozen()).unwrap();
    let b = mamba_block(&x, &q, &q.set.bind_frozen()).unwrap();
    assert!(max_rel_err(a.data(), b.data(), 1.0) < 1e-12);
}

/// Central differences of `loss` for a handful of coordinates of every
/// parameter tensor, compared with the analytic gradient.
fn check_param_grads(p: &MambaNetParams, loss: impl Fn(&[Tensor]) -> Tensor, per_tensor: usize) -> f64 {
    let bound = p.set.bind();
    loss(&bound).backward().unwrap();
    let mut worst = 0.0f64;
    for (id, leaf) in bound.iter().enumerate() {
        let grad = leaf.grad().unwrap_or_else(|| vec![0.0; leaf.len()]);
        let n = leaf.len();
        let stride = (n / per_tensor).max(1);
        for i in (0..n).step_by(stride).take(per_tensor) {
            let eval = |delta: f64| {
                let mut set = p.set.clone();
                set.data_mut(id)[i] += delta;
                loss(&set.bind_frozen()).item()
            };
            let h = 1e-6;
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            worst = worst.max(max_rel_err(&[grad[i]], &[numeric], 1e-3));
        }
    }
    worst
}

#[test]
fn mamba_block_gradient_matches_finite_differences() {
    let cfg = small_cfg();
    let p = MambaNetParams::init(&cfg, 11).unwrap();
    let l = cfg.seq_len();
    let x = Tensor::new(&[l, 2], rand_vec(2 * l, 12)).unwrap();
    let target = Tensor::new(&[l, 2], rand_vec(2 * l, 13)).unwrap();
    let err = check_param_grads(
        &p,
        |b| {
            let y = mamba_block(&x, &p, b).unwrap();
            let e = y.sub(&target).unwrap();
            e.mul(&e).unwrap().mean()
        },
        6,
    );
    assert!(err < 1e-4, "relative error {err}");
}

#[test]
fn refine_head_default_shape() {
    let cfg = MambaNetConfig::for_baseband(&BasebandConfig::default());
    let p = MambaNetParams::init(&cfg, 5).unwrap();
    let y = Tensor::new(&[228, 2], rand_vec(456, 1)).unwrap();
    let out = refine_head(&y, &p, &p.set.bind_frozen()).unwrap();
    assert_eq!(out.shape(), &[228, 14, 2]);
}

#[test]
fn zero_network_outputs_head_bias() {
    let cfg = small_cfg();
    let mut p = MambaNetParams::init(&cfg, 5).unwrap();
    let ids: Vec<usize> = (0..p.set.len()).collect();
    zeroed(&mut p, &ids);
    p.set.data_mut(p.layout.head_b).copy_from_slice(&[0.25, -1.5]);
    let y = Tensor::new(&[16, 2], rand_vec(32, 1)).unwrap();
    let out = refine_head(&y, &p, &p.set.bind_frozen()).unwrap();
    for px in out.data().chunks(2) {
        assert_eq!(px, &[0.25, -1.5]);
    }
}

#[test]
fn forward_is_deterministic_and_finite() {
    let cfg = small_cfg();
    let p = MambaNetParams::init(&cfg, 9).unwrap();
    let ls = random_ls(&cfg, 10);
    let a = p.forward(&ls).unwrap();
    let b = p.forward(&ls).unwrap();
    assert_eq!(a, b);
    assert_eq!((a.n_f(), a.n_s()), (16, 14));
    assert!(a.values().iter().all(|v| v.re.is_finite() && v.im.is_finite()));
}

#[test]
fn init_is_seeded() {
    let cfg = small_cfg();
    let a = MambaNetParams::init(&cfg, 1).unwrap();
    let b = MambaNetParams::init(&cfg, 1).unwrap();
    let c = MambaNetParams::init(&cfg, 2).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.set, c.set);
    let bound = 1.0 / (cfg.seq_len() as f64).sqrt();
    assert!(a.set.data(a.layout.attn_in_w).iter().all(|v| v.abs() <= bound));
    assert!(a.set.data(a.layout.ln1_w).iter().all(|&v| v == 1.0));
}

#[test]
fn every_parameter_gets_gradient() {
    let cfg = small_cfg();
    let p = MambaNetParams::init(&cfg, 21).unwrap();
    let tokens = tokenize(&random_ls(&cfg, 22), &cfg).unwrap();
    let target = Tensor::new(&[16, 14, 2], rand_vec(448, 23)).unwrap();
    let bound = p.set.bind();
    let out = forward_tensors(&p, &bound, &tokens).unwrap();
    let e = out.sub(&target).unwrap();
    e.mul(&e).unwrap().mean().backward().unwrap();
    for (id, leaf) in bound.iter().enumerate() {
        let g = leaf.grad().unwrap();
        assert!(g.iter().any(|&v| v != 0.0), "{} has zero gradient", p.set.name(id));
    }
}

#[test]
fn full_model_gradient_spot_check() {
    let cfg = small_cfg();
    let p = MambaNetParams::init(&cfg, 31).unwrap();
    let tokens = tokenize(&random_ls(&cfg, 32), &cfg).unwrap();
    let target = Tensor::new(&[16, 14, 2], rand_vec(448, 33)).unwrap();
    let err = check_param_grads(
        &p,
        |b| {
            let e = forward_tensors(&p, b, &tokens).unwrap().sub(&target).unwrap();
            e.mul(&e).unwrap().mean()
        },
        3,
    );
    assert!(err < 1e-4, "relative error {err}");
}

#[test]
fn parameter_count_at_defaults() {
    let cfg = MambaNetConfig::for_baseband(&BasebandConfig::default());
    let r = count_parameters(&cfg);
    let in_proj: usize = r
        .breakdown
        .iter()
        .filter(|(g, _)| g == "attention.in_proj")
        .map(|(_, n)| n)
        .sum();
    assert_eq!(in_proj, 156_636);
    assert_eq!(r.total, 275_512);
    assert!((250_000..=450_000).contains(&r.total));
    assert_eq!(r.total, MambaNetParams::init(&cfg, 0).unwrap().set.num_elements());
    assert_eq!(r.breakdown.iter().map(|(_, n)| n).sum::<usize>(), r.total);
}

#[test]
fn quadratic_subtotal_scales_by_four() {
    let cfg = MambaNetConfig::for_baseband(&BasebandConfig::default());
    let doubled = MambaNetConfig::for_baseband(&BasebandConfig::with_subcarriers(456));
    let ratio = count_parameters(&doubled).quadratic as f64 / count_parameters(&cfg).quadratic as f64;
    assert!((ratio - 4.0).abs() < 0.04, "ratio {ratio}");
    let r = count_parameters(&cfg);
    assert!(r.scaling_exponent > 1.0 && r.scaling_exponent < 2.0);
}

#[test]
fn checkpoint_roundtrip() {
    let cfg = MambaNetConfig {
        token_order: TokenOrder::SubcarrierMajor,
        ..small_cfg()
    };
    let p = MambaNetParams::init(&cfg, 41).unwrap();
    let ck = p.to_checkpoint(&[("seed".into(), "41".into())]);
    let mut buf = Vec::new();
    ck.write_to(&mut buf).unwrap();
    let back = Checkpoint::read_from(&mut buf.as_slice()).unwrap();
    assert_eq!(back.header_value("seed"), Some("41"));
    let q = MambaNetParams::from_checkpoint(&back).unwrap();
    assert_eq!(p, q);
}

#[test]
fn checkpoint_shape_mismatch_rejected() {
    let p = MambaNetParams::init(&small_cfg(), 41).unwrap();
    let mut ck = p.to_checkpoint(&[]);
    for (k, v) in ck.header.iter_mut() {
        if k == "model.c_spread" {
            *v = "5".into();
        }
    }
    assert!(MambaNetParams::from_checkpoint(&ck).is_err());
}
