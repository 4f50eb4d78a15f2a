//! Dense tensors, a reverse-mode tape, and the optimizer used by every
//! trainable component.

pub mod gradcheck;
mod optim;
mod tape;
mod tensor;

pub use optim::{Adam, AdamConfig};
pub use tape::{Grads, Tape, Var};
pub use tensor::{cosine_similarity, Tensor};

pub(crate) use tape::sigmoid;
pub(crate) use tensor::gemm;

use crate::error::Result;

/// Mean softmax cross-entropy of `logits [n × V]` against `targets`.
pub fn softmax_xent(logits: &Tensor, targets: &[usize]) -> Result<f64> {
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone());
    let loss = tape.softmax_xent(l, targets)?;
    tape.value(loss).item()
}

/// Row-wise log-softmax.
pub fn log_softmax_rows(logits: &Tensor) -> Tensor {
    let (r, c) = logits.dims();
    let mut out = Vec::with_capacity(r * c);
    for i in 0..r {
        let row = logits.row_slice(i);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        out.extend(row.iter().map(|v| v - lse));
    }
    Tensor::raw(vec![r, c], out)
}

#[cfg(test)]
mod tests {
    use super::gradcheck::check_gradients;
    use super::*;
    use crate::error::Error;
    use crate::rng;

    fn random(r: usize, c: usize, label: &str) -> Tensor {
        let mut g = rng::stream(11, label);
        Tensor::matrix(r, c, rng::normal_vec(&mut g, r * c, 1.0)).unwrap()
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let mut t = Tape::new();
        let p = t.param(random(3, 4, "p"));
        let s = t.sum(p).unwrap();
        let g = t.grad(s, &[p]).unwrap();
        assert!(g[0].data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn grad_of_half_square_norm_is_identity() {
        let p0 = random(2, 5, "q");
        let mut t = Tape::new();
        let p = t.param(p0.clone());
        let sq = t.square(p).unwrap();
        let s = t.sum(sq).unwrap();
        let l = t.scale(s, 0.5).unwrap();
        let g = t.grad(l, &[p]).unwrap();
        assert_eq!(g[0], p0);
    }

    #[test]
    fn grad_errors() {
        let mut t = Tape::new();
        let p = t.param(random(2, 2, "r"));
        assert!(matches!(t.grad(p, &[p]), Err(Error::NotScalar(_))));
        let mut other = Tape::new();
        let foreign = other.param(random(1, 1, "s"));
        let s = t.sum(p).unwrap();
        assert!(matches!(t.grad(s, &[foreign]), Err(Error::NotOnTape(_))));
    }

    #[test]
    fn only_trainable_leaves_get_gradients() {
        let mut t = Tape::new();
        let w = t.param(random(3, 3, "w"));
        let x = t.constant(random(2, 3, "x"));
        let h = t.matmul_nt(x, w).unwrap();
        let y = t.tanh(h).unwrap();
        let l = t.sum(y).unwrap();
        let g = t.backward(l).unwrap();
        assert!(g.get(w).is_some());
        assert!(g.get(x).is_none());
        assert!(g.get(h).is_none());
    }

    #[test]
    fn uniform_logits_give_ln_v() {
        for v in [2usize, 10, 128] {
            let logits = Tensor::filled(5, v, 0.37);
            let loss = softmax_xent(&logits, &[0, 1, 1, 0, 1]).unwrap();
            assert!((loss - (v as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn xent_decreases_with_margin() {
        let mut last = f64::INFINITY;
        for margin in [0.0, 0.5, 1.0, 2.0, 5.0, 10.0] {
            let logits = Tensor::from_fn(1, 4, |_, j| if j == 2 { margin } else { 0.0 });
            let loss = softmax_xent(&logits, &[2]).unwrap();
            assert!(loss < last);
            last = loss;
        }
        assert!(last < 1e-3);
    }

    #[test]
    fn xent_matches_log_sum_exp() {
        let logits = random(8, 10, "xent");
        let targets = [0, 3, 9, 2, 2, 7, 5, 1];
        let mut want = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let row = logits.row_slice(i);
            let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
            want += lse - row[t];
        }
        want /= 8.0;
        assert!((softmax_xent(&logits, &targets).unwrap() - want).abs() < 1e-10);
    }

    #[test]
    fn xent_label_out_of_range() {
        assert!(matches!(softmax_xent(&Tensor::zeros(1, 3), &[3]), Err(Error::LabelOutOfRange { .. })));
    }

    #[test]
    fn every_primitive_passes_finite_differences() {
        let params = vec![
            random(4, 6, "a"),
            random(6, 5, "b"),
            random(1, 5, "row"),
            random(4, 1, "col"),
            random(10, 5, "emb"),
        ];
        let report = check_gradients(
            &params,
            |t, v| {
                let h = t.matmul(v[0], v[1])?;
                let h = t.add_row(h, v[2])?;
                let h = t.mul_col(h, v[3])?;
                let s = t.sigmoid(h)?;
                let th = t.tanh(h)?;
                let m = t.mul(s, th)?;
                let m = t.mul_row(m, v[2])?;
                let e = t.embedding(v[4], &[1, 3, 3, 7])?;
                let e = t.silu(e)?;
                let n = t.rms_norm(e)?;
                let x = t.add(m, n)?;
                let sq = t.square(x)?;
                let sq = t.shift(sq, 1.0)?;
                let r = t.sqrt(sq)?;
                let ex = t.exp(th)?;
                let d = t.div(r, ex)?;
                let tr = t.transpose(d)?;
                let p = t.matmul_tn(tr, tr)?;
                let q = t.matmul_nt(p, p)?;
                let rows = t.sum_cols(q)?;
                let rs = t.sum(rows)?;
                let xe = t.softmax_xent(x, &[0, 4, 2, 1])?;
                let sub = t.sub(xe, rs)?;
                t.scale(sub, 0.01)
            },
            100,
            1e-5,
            3,
        )
        .unwrap();
        assert!(report.passes(1e-4), "{report:?}");
    }

    #[test]
    fn attention_passes_finite_differences() {
        let params = vec![random(6, 4, "q"), random(6, 4, "k"), random(6, 4, "v")];
        let report = check_gradients(
            &params,
            |t, v| {
                let o = t.causal_attention(v[0], v[1], v[2], 3)?;
                let o = t.tanh(o)?;
                t.sum(o)
            },
            72,
            1e-5,
            5,
        )
        .unwrap();
        assert!(report.passes(1e-4), "{report:?}");
    }

    #[test]
    fn attention_first_position_copies_value() {
        let mut t = Tape::new();
        let q = t.constant(random(4, 3, "q1"));
        let k = t.constant(random(4, 3, "k1"));
        let vt = random(4, 3, "v1");
        let v = t.constant(vt.clone());
        let o = t.causal_attention(q, k, v, 2).unwrap();
        let out = t.value(o);
        assert_eq!(out.row_slice(0), vt.row_slice(0));
        assert_eq!(out.row_slice(2), vt.row_slice(2));
    }
}
