//! Finite-difference checks for every tape op and a one-layer model.
//! Shared by the core property tests and the acceptance suite.

use nahw_core::autograd::{grad_check, GradCheck, LAYER_NORM_EPS};
use nahw_core::lora::LoraConfig;
use nahw_core::model::{ModelConfig, TransformerModel};
use nahw_core::{DType, Rng, Result, Tape, Tensor, Var};

pub const H: f64 = 1e-5;

fn randn(s: &mut nahw_core::rng::Stream, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| scale * s.normal()).collect()).unwrap()
}

/// `sum(y ⊙ w)` for a fixed random `w`, so every output element matters.
fn project(tape: &mut Tape, y: Var, w: &Tensor) -> Result<Var> {
    let wv = tape.constant(w.clone());
    let p = tape.mul(y, wv)?;
    Ok(tape.sum(p))
}

/// One check per op for inputs drawn from `seed`.
pub fn check_ops(seed: u64) -> Result<Vec<(&'static str, GradCheck)>> {
    let mut s = Rng::new(seed).stream();
    let (m, k, n) = (2 + s.below(3), 2 + s.below(3), 2 + s.below(3));
    let a = randn(&mut s, &[m, k], 1.0);
    let b = randn(&mut s, &[k, n], 1.0);
    let bt = randn(&mut s, &[n, k], 1.0);
    let same = randn(&mut s, &[m, k], 1.0);
    let row = randn(&mut s, &[k], 1.0);
    let w_mn = randn(&mut s, &[m, n], 1.0);
    let w_mk = randn(&mut s, &[m, k], 1.0);
    let gain = randn(&mut s, &[k], 1.0);
    let bias = randn(&mut s, &[k], 1.0);
    let table = randn(&mut s, &[5, k], 1.0);
    let ids: Vec<u32> = (0..m).map(|_| s.below(5) as u32).collect();
    let targets: Vec<u32> = (0..m).map(|_| s.below(k) as u32).collect();
    let even = randn(&mut s, &[m, 2 * k], 1.0);
    let w_even = randn(&mut s, &[m, 2 * k], 1.0);
    let w_cat = randn(&mut s, &[m, k + n], 1.0);
    let w_slice = randn(&mut s, &[m, k - 1], 1.0);
    let w_gather = randn(&mut s, &[m, k], 1.0);
    let drop_rng = Rng::new(seed).fork_str("dropout");

    let mut out = Vec::new();
    let mut run = |name, x: &Tensor, f: &dyn Fn(&mut Tape, Var) -> Result<Var>| -> Result<()> {
        out.push((name, grad_check(f, x, H)?));
        Ok(())
    };
    run("matmul_lhs", &a, &|t, x| {
        let bv = t.constant(b.clone());
        let y = t.matmul(x, bv)?;
        project(t, y, &w_mn)
    })?;
    run("matmul_rhs", &b, &|t, x| {
        let av = t.constant(a.clone());
        let y = t.matmul(av, x)?;
        project(t, y, &w_mn)
    })?;
    run("matmul_bt_lhs", &a, &|t, x| {
        let bv = t.constant(bt.clone());
        let y = t.matmul_bt(x, bv)?;
        project(t, y, &w_mn)
    })?;
    run("matmul_bt_rhs", &bt, &|t, x| {
        let av = t.constant(a.clone());
        let y = t.matmul_bt(av, x)?;
        project(t, y, &w_mn)
    })?;
    run("add", &a, &|t, x| {
        let c = t.constant(same.clone());
        let y = t.add(x, c)?;
        let y = t.add(y, x)?;
        project(t, y, &w_mk)
    })?;
    run("mul", &a, &|t, x| {
        let c = t.constant(same.clone());
        let y = t.mul(x, c)?;
        let y = t.mul(y, x)?;
        project(t, y, &w_mk)
    })?;
    run("scale", &a, &|t, x| {
        let y = t.scale(x, -1.7);
        project(t, y, &w_mk)
    })?;
    run("add_row_matrix", &a, &|t, x| {
        let r = t.constant(row.clone());
        let y = t.add_row(x, r)?;
        project(t, y, &w_mk)
    })?;
    run("add_row_row", &row, &|t, x| {
        let av = t.constant(a.clone());
        let y = t.add_row(av, x)?;
        project(t, y, &w_mk)
    })?;
    run("add_const", &a, &|t, x| {
        let y = t.add_const(x, &same)?;
        project(t, y, &w_mk)
    })?;
    run("dropout", &a, &|t, x| {
        let y = t.dropout(x, 0.3, drop_rng, true)?;
        project(t, y, &w_mk)
    })?;
    run("gelu", &a, &|t, x| {
        let y = t.gelu(x);
        project(t, y, &w_mk)
    })?;
    run("softmax_rows", &a, &|t, x| {
        let y = t.softmax_rows(x)?;
        project(t, y, &w_mk)
    })?;
    run("layer_norm_x", &a, &|t, x| {
        let g = t.constant(gain.clone());
        let bb = t.constant(bias.clone());
        let y = t.layer_norm(x, g, bb, LAYER_NORM_EPS)?;
        project(t, y, &w_mk)
    })?;
    run("layer_norm_gain", &gain, &|t, x| {
        let av = t.constant(a.clone());
        let bb = t.constant(bias.clone());
        let y = t.layer_norm(av, x, bb, LAYER_NORM_EPS)?;
        project(t, y, &w_mk)
    })?;
    run("layer_norm_bias", &bias, &|t, x| {
        let av = t.constant(a.clone());
        let g = t.constant(gain.clone());
        let y = t.layer_norm(av, g, x, LAYER_NORM_EPS)?;
        project(t, y, &w_mk)
    })?;
    run("cross_entropy", &a, &|t, x| t.cross_entropy(x, &targets))?;
    run("gather", &table, &|t, x| {
        let y = t.gather(x, &ids)?;
        project(t, y, &w_gather)
    })?;
    run("slice_cols", &a, &|t, x| {
        let y = t.slice_cols(x, 1, k - 1)?;
        project(t, y, &w_slice)
    })?;
    run("concat_cols", &a, &|t, x| {
        let c = t.constant(randn(&mut Rng::new(seed).stream(), &[m, n], 1.0));
        let y = t.concat_cols(&[x, c])?;
        project(t, y, &w_cat)
    })?;
    run("rope", &even, &|t, x| {
        let y = t.rope(x, 10_000.0)?;
        project(t, y, &w_even)
    })?;
    run("sum", &a, &|t, x| Ok(t.sum(x)))?;
    Ok(out)
}

pub fn tiny_model(seed: u64) -> TransformerModel {
    let cfg = ModelConfig {
        vocab_size: 12,
        d_model: 8,
        n_heads: 2,
        n_layers: 1,
        d_ffn: 16,
        max_seq_len: 8,
        ..ModelConfig::default()
    };
    let lora = LoraConfig {
        rank: 2,
        alpha: 4.0,
        dropout: 0.1,
        ..LoraConfig::default()
    };
    let mut model = TransformerModel::build(&cfg, &lora, Rng::new(seed)).unwrap();
    // Fresh adapters have B = 0, which would zero the gradient of A.
    let mut s = Rng::new(seed).fork_str("b").stream();
    for t in model.trainable_mut() {
        if t.data().iter().all(|&v| v == 0.0) {
            for v in t.data_mut() {
                *v = 0.1 * s.normal();
            }
        }
    }
    model
}

/// One check per trainable tensor of a one-layer model in training mode
/// (dropout active).
pub fn check_model(seed: u64) -> Result<Vec<(String, GradCheck)>> {
    let model = tiny_model(seed);
    let mut s = Rng::new(seed).fork_str("tokens").stream();
    let len = 3 + s.below(4);
    let inputs: Vec<u32> = (0..len).map(|_| s.below(12) as u32).collect();
    let targets: Vec<u32> = (0..len).map(|_| s.below(12) as u32).collect();
    let drop = Rng::new(seed).fork_str("dropout");
    let names = model.trainable_names();
    let params: Vec<Tensor> = model.trainable().into_iter().map(|t| t.cast(DType::Double)).collect();
    let mut out = Vec::new();
    for (i, p) in params.iter().enumerate() {
        let c = grad_check(
            |tape, x| {
                let bound = model.bind(tape, DType::Double, false, Some((i, x)));
                model.loss_on(tape, &bound, &inputs, &targets, true, drop)
            },
            p,
            H,
        )?;
        out.push((names[i].clone(), c));
    }
    Ok(out)
}
