#![allow(dead_code)]

pub mod oracles;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vit_tad_core::propagation::reference_sequence_attention;
use vit_tad_tensor::{GradCheckOptions, Graph, ParamStore, Tensor, TensorError};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(shape: &[usize], rng: &mut impl Rng, scale: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-scale..scale)).unwrap()
}

/// Overwrites every parameter whose name starts with `prefix` with uniform noise.
pub fn randomize(store: &mut ParamStore, prefix: &str, rng: &mut impl Rng, scale: f64) {
    let ids: Vec<_> = store.ids().filter(|&id| store.get(id).name.starts_with(prefix)).collect();
    assert!(!ids.is_empty(), "no parameters under {prefix}");
    for id in ids {
        for v in store.tensor_mut(id).data_mut() {
            *v = rng.random_range(-scale..scale);
        }
    }
}

/// Sets every parameter under `prefix` to zero.
pub fn zero_out(store: &mut ParamStore, prefix: &str) {
    for id in store.ids().collect::<Vec<_>>() {
        if store.get(id).name.starts_with(prefix) {
            store.tensor_mut(id).data_mut().fill(0.0);
        }
    }
}

pub fn param<'a>(store: &'a ParamStore, name: &str) -> &'a Tensor {
    store.tensor(store.find(name).unwrap_or_else(|| panic!("missing {name}")))
}

pub fn to_tensor_err(e: vit_tad_core::Error) -> TensorError {
    TensorError::GradCheck(e.to_string())
}

pub fn gradcheck_opts(max_entries: Option<usize>) -> GradCheckOptions {
    GradCheckOptions {
        max_entries_per_param: max_entries,
        ..Default::default()
    }
}

/// Forward of a closure on a frozen graph.
pub fn eval_frozen(store: &ParamStore, f: impl for<'g> Fn(&'g Graph, &vit_tad_tensor::BoundParams<'g>) -> vit_tad_tensor::Var<'g>) -> Tensor {
    let g = Graph::new();
    let p = store.bind_frozen(&g);
    (*f(&g, &p).value()).clone()
}

pub fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

/// Row-wise layer norm of `[n, c]` with eps 1e-6.
pub fn layer_norm_rows(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Tensor {
    let c = x.last_dim();
    let mut out = Vec::with_capacity(x.numel());
    for row in x.data().chunks(c) {
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
        for (j, v) in row.iter().enumerate() {
            out.push((v - mean) / (var + 1e-6).sqrt() * gamma.data()[j] + beta.data()[j]);
        }
    }
    Tensor::new(x.shape(), out).unwrap()
}

/// `x·w + b` for `x: [n, k]`, `w: [k, m]`.
pub fn affine(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Tensor {
    let (n, k, m) = (x.shape()[0], w.shape()[0], w.shape()[1]);
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            let mut s = b.map_or(0.0, |b| b.data()[j]);
            for l in 0..k {
                s += x.data()[i * k + l] * w.data()[l * m + j];
            }
            out[i * m + j] = s;
        }
    }
    Tensor::new(&[n, m], out).unwrap()
}

/// One pre-norm encoder layer over a single sequence `[n, C]`, in plain loops,
/// reading weights named `{name}.*` from `store`.
pub fn reference_encoder_layer(store: &ParamStore, name: &str, x: &Tensor, heads: usize) -> Tensor {
    let p = |s: &str| param(store, &format!("{name}.{s}"));
    let h = layer_norm_rows(x, p("ln1.gamma"), p("ln1.beta"));
    // the reference returns h + branch; the branch is added to x instead
    let a = reference_sequence_attention(
        &h,
        p("attn.w_q"),
        p("attn.w_k"),
        p("attn.w_v"),
        p("attn.out.w"),
        p("attn.out.b"),
        heads,
    );
    let branch: Vec<f64> = a.data().iter().zip(h.data()).map(|(a, h)| a - h).collect();
    let x1: Vec<f64> = x.data().iter().zip(&branch).map(|(x, b)| x + b).collect();
    let x1 = Tensor::new(x.shape(), x1).unwrap();
    let h2 = layer_norm_rows(&x1, p("ln2.gamma"), p("ln2.beta"));
    let m = affine(&h2, p("mlp.fc1.w"), Some(p("mlp.fc1.b"))).map(gelu);
    let m = affine(&m, p("mlp.fc2.w"), Some(p("mlp.fc2.b")));
    Tensor::new(x.shape(), x1.data().iter().zip(m.data()).map(|(a, b)| a + b).collect()).unwrap()
}

pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.max_abs_diff(b)
}
