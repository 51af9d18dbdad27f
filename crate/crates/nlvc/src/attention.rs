//! Cross attention between current mid-features and reference features.
//!
//! Two routes compute a non-local context: the quadratic route materializes
//! the LxL' similarity matrix (kept as the inspection oracle), and the
//! linear route applies two independent softmaxes to the queries (over
//! channels) and keys (over positions) so the dxd key-value product can be
//! formed first. The implicit similarity matrix of the linear route is
//! row-stochastic, so its output stays a convex combination of value rows.

use std::time::Instant;

use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::blocks::{ConvLayer, DwResBlock};
use crate::error::{Error, Result};
use crate::params::{Binding, ParamStore};
use crate::tensor::{Graph, TensorId};

#[derive(Clone, Copy, Debug)]
pub struct AttentionConfig {
    pub embed_dim: usize,
    pub num_heads: usize,
}

impl AttentionConfig {
    pub fn new(embed_dim: usize, num_heads: usize) -> Result<Self> {
        if embed_dim == 0 || num_heads == 0 || embed_dim % num_heads != 0 {
            return Err(Error::config(format!(
                "embed_dim {embed_dim} must be a positive multiple of num_heads {num_heads}"
            )));
        }
        Ok(AttentionConfig { embed_dim, num_heads })
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }
}

/// Query embedding: depth-wise res block on the input channels, then a
/// pointwise projection to the embedding width, flattened to LxD rows.
#[derive(Clone, Debug)]
pub struct QEmbed {
    block: DwResBlock,
    proj: ConvLayer,
}

impl QEmbed {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        c_in: usize,
        d: usize,
        slope: f64,
    ) -> Self {
        QEmbed {
            block: DwResBlock::new(store, rng, &format!("{name}.block"), c_in, slope),
            proj: ConvLayer::new(store, rng, &format!("{name}.proj"), c_in, d, 1, 1, 1, 1.0),
        }
    }

    /// CxHxW -> (H*W)xD query rows.
    pub fn forward(&self, g: &mut Graph, bind: &Binding, y: TensorId) -> Result<TensorId> {
        let h = self.block.forward(g, bind, y)?;
        let e = self.proj.forward(g, bind, h)?;
        g.flatten_spatial(e)
    }
}

/// Key/value embedding: one shared trunk with two pointwise heads.
#[derive(Clone, Debug)]
pub struct KvEmbed {
    trunk: DwResBlock,
    k_head: ConvLayer,
    v_head: ConvLayer,
}

impl KvEmbed {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        c_in: usize,
        d: usize,
        slope: f64,
    ) -> Self {
        KvEmbed {
            trunk: DwResBlock::new(store, rng, &format!("{name}.trunk"), c_in, slope),
            k_head: ConvLayer::new(store, rng, &format!("{name}.k"), c_in, d, 1, 1, 1, 1.0),
            v_head: ConvLayer::new(store, rng, &format!("{name}.v"), c_in, d, 1, 1, 1, 1.0),
        }
    }

    /// CxHxW -> (K rows, V rows), both (H*W)xD.
    pub fn forward(&self, g: &mut Graph, bind: &Binding, f: TensorId) -> Result<(TensorId, TensorId)> {
        let t = self.trunk.forward(g, bind, f)?;
        let k = self.k_head.forward(g, bind, t)?;
        let v = self.v_head.forward(g, bind, t)?;
        Ok((g.flatten_spatial(k)?, g.flatten_spatial(v)?))
    }
}

/// Softmax(Q K^T) V with the explicit similarity matrix retained for test
/// inspection. Quadratic in the sequence lengths.
pub fn vanilla_cross_attention(
    g: &mut Graph,
    q: TensorId,
    k: TensorId,
    v: TensorId,
) -> Result<(TensorId, TensorId)> {
    let kt = g.transpose(k)?;
    let scores = g.matmul(q, kt)?;
    let sim = g.softmax(scores, 1)?;
    let out = g.matmul(sim, v)?;
    Ok((out, sim))
}

/// Softmax2(Q) (Softmax1(K)^T V): keys normalized over positions, queries
/// over channels, key-value product formed first. Never materializes an
/// LxL' buffer.
pub fn linear_cross_attention(
    g: &mut Graph,
    q: TensorId,
    k: TensorId,
    v: TensorId,
) -> Result<TensorId> {
    let sq = g.softmax(q, 1)?;
    let sk = g.softmax(k, 0)?;
    let skt = g.transpose(sk)?;
    let kv = g.matmul(skt, v)?;
    g.matmul(sq, kv)
}

/// Multi-head linear cross attention over spatial features: embeds the
/// query from the current mid-feature and keys/values from one reference
/// feature, runs each head linearly, concatenates, and applies an output
/// depth-wise res block (zero-initialized: starts near pass-through).
#[derive(Clone, Debug)]
pub struct Mhlca {
    pub cfg: AttentionConfig,
    q_embed: QEmbed,
    kv_embed: KvEmbed,
    out_block: DwResBlock,
}

impl Mhlca {
    pub fn new(cfg: AttentionConfig, q_embed: QEmbed, kv_embed: KvEmbed, out_block: DwResBlock) -> Self {
        Mhlca { cfg, q_embed, kv_embed, out_block }
    }

    /// `y` is the current mid-feature at this scale, `f_ref` one reference
    /// feature at the same scale; the output has `embed_dim` channels on
    /// `y`'s spatial extents.
    pub fn forward(&self, g: &mut Graph, bind: &Binding, y: TensorId, f_ref: TensorId) -> Result<TensorId> {
        let (h, w) = {
            let s = g.shape(y);
            (s[1], s[2])
        };
        let q = self.q_embed.forward(g, bind, y)?;
        let (k, v) = self.kv_embed.forward(g, bind, f_ref)?;
        let hd = self.cfg.head_dim();
        let mut heads = Vec::with_capacity(self.cfg.num_heads);
        for i in 0..self.cfg.num_heads {
            let qh = g.slice_cols(q, i * hd, hd)?;
            let kh = g.slice_cols(k, i * hd, hd)?;
            let vh = g.slice_cols(v, i * hd, hd)?;
            heads.push(linear_cross_attention(g, qh, kh, vh)?);
        }
        let rows = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
        let spatial = g.unflatten_spatial(rows, h, w)?;
        self.out_block.forward(g, bind, spatial)
    }
}

// ── Operation-count model ───────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionMode {
    Vanilla,
    Linear,
}

impl AttentionMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            AttentionMode::Vanilla => "vanilla",
            AttentionMode::Linear => "linear",
        }
    }
}

/// Multiply-add count of one cross-attention at spatial extents HxW and
/// embedding width d: quadratic route 2(HW)^2 d, linear route 2 HW d^2.
pub fn op_count(mode: AttentionMode, h: usize, w: usize, d: usize) -> u128 {
    let l = (h as u128) * (w as u128);
    match mode {
        AttentionMode::Vanilla => 2 * l * l * d as u128,
        AttentionMode::Linear => 2 * l * (d as u128) * (d as u128),
    }
}

/// linear/vanilla multiply-add ratio, `d / (HW)`.
pub fn op_count_ratio(h: usize, w: usize, d: usize) -> f64 {
    d as f64 / (h as f64 * w as f64)
}

// ── Test-side oracles ───────────────────────────────────────────────────

/// Materialized implicit similarity Softmax2(Q) Softmax1(K)^T, computed
/// with plain array math, independent of the tape. Only for tests and
/// probes: this is exactly the buffer the linear route avoids.
pub fn implicit_similarity(q: &[f64], lq: usize, k: &[f64], lk: usize, d: usize) -> Vec<f64> {
    assert_eq!(q.len(), lq * d);
    assert_eq!(k.len(), lk * d);
    // softmax over channels per query row
    let mut sq = vec![0.0; lq * d];
    for r in 0..lq {
        let row = &q[r * d..(r + 1) * d];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for i in 0..d {
            let e = (row[i] - m).exp();
            sq[r * d + i] = e;
            denom += e;
        }
        for i in 0..d {
            sq[r * d + i] /= denom;
        }
    }
    // softmax over positions per key channel
    let mut sk = vec![0.0; lk * d];
    for c in 0..d {
        let mut m = f64::NEG_INFINITY;
        for r in 0..lk {
            m = m.max(k[r * d + c]);
        }
        let mut denom = 0.0;
        for r in 0..lk {
            let e = (k[r * d + c] - m).exp();
            sk[r * d + c] = e;
            denom += e;
        }
        for r in 0..lk {
            sk[r * d + c] /= denom;
        }
    }
    // sq (lq x d) * sk^T (d x lk)
    let mut sim = vec![0.0; lq * lk];
    for r in 0..lq {
        for c in 0..d {
            let qv = sq[r * d + c];
            for j in 0..lk {
                sim[r * lk + j] += qv * sk[j * d + c];
            }
        }
    }
    sim
}

/// Per-query argmax over the implicit similarity (the non-local capture
/// probe / attention-map dump).
pub fn attention_argmax(q: &[f64], lq: usize, k: &[f64], lk: usize, d: usize) -> Vec<usize> {
    let sim = implicit_similarity(q, lq, k, lk, d);
    (0..lq)
        .map(|r| {
            let row = &sim[r * lk..(r + 1) * lk];
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

// ── Benchmark harness ───────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize)]
pub struct BenchRecord {
    pub mode: String,
    pub l: usize,
    pub d: usize,
    pub heads: usize,
    pub mul_adds: u128,
    pub wall_ns: u128,
}

/// Times one attention route on random LxD operands, amortized over `runs`.
pub fn bench_attention(mode: AttentionMode, l: usize, d: usize, heads: usize, runs: usize) -> BenchRecord {
    use rand::{Rng, SeedableRng};
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let q: Vec<f64> = (0..l * d).map(|_| rng.gen::<f64>() - 0.5).collect();
    let k: Vec<f64> = (0..l * d).map(|_| rng.gen::<f64>() - 0.5).collect();
    let v: Vec<f64> = (0..l * d).map(|_| rng.gen::<f64>() - 0.5).collect();
    let mut best = u128::MAX;
    for _ in 0..runs {
        let start = Instant::now();
        let mut g = Graph::new();
        let qi = g.constant(q.clone(), &[l, d]).unwrap();
        let ki = g.constant(k.clone(), &[l, d]).unwrap();
        let vi = g.constant(v.clone(), &[l, d]).unwrap();
        let out = match mode {
            AttentionMode::Vanilla => vanilla_cross_attention(&mut g, qi, ki, vi).unwrap().0,
            AttentionMode::Linear => linear_cross_attention(&mut g, qi, ki, vi).unwrap(),
        };
        std::hint::black_box(g.data(out)[0]);
        best = best.min(start.elapsed().as_nanos());
    }
    // L = HxW for the count model; use W = L, H = 1.
    BenchRecord {
        mode: mode.as_str().to_string(),
        l,
        d,
        heads,
        mul_adds: op_count(mode, 1, l, d),
        wall_ns: best,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn rows(rng: &mut ChaCha8Rng, l: usize, d: usize) -> Vec<f64> {
        (0..l * d).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect()
    }

    #[test]
    fn vanilla_single_key_returns_value() {
        let mut g = Graph::new();
        let q = g.constant(vec![0.3, -0.8, 0.1, 0.9, 0.0, -0.2], &[2, 3]).unwrap();
        let k = g.constant(vec![0.5, 0.5, -1.0], &[1, 3]).unwrap();
        let v = g.constant(vec![7.0, -3.0, 2.0], &[1, 3]).unwrap();
        let (out, _) = vanilla_cross_attention(&mut g, q, k, v).unwrap();
        for r in 0..2 {
            for c in 0..3 {
                assert!((g.data(out)[r * 3 + c] - g.data(v)[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn vanilla_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (l, lk, d) = (7, 5, 4);
        let mut g = Graph::new();
        let q = g.constant(rows(&mut rng, l, d), &[l, d]).unwrap();
        let k = g.constant(rows(&mut rng, lk, d), &[lk, d]).unwrap();
        let v = g.constant(rows(&mut rng, lk, d), &[lk, d]).unwrap();
        let (_, sim) = vanilla_cross_attention(&mut g, q, k, v).unwrap();
        for r in 0..l {
            let s: f64 = g.data(sim)[r * lk..(r + 1) * lk].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn vanilla_saturates_to_matching_value_rows() {
        // one-hot rows scaled by 50: query i attends to key i almost fully
        let d = 4;
        let mut g = Graph::new();
        let mut qdata = vec![0.0; d * d];
        for i in 0..d {
            qdata[i * d + i] = 50.0;
        }
        let q = g.constant(qdata.clone(), &[d, d]).unwrap();
        let mut kdata = vec![0.0; d * d];
        for i in 0..d {
            kdata[i * d + i] = 1.0;
        }
        let k = g.constant(kdata, &[d, d]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let vdata = rows(&mut rng, d, d);
        let v = g.constant(vdata.clone(), &[d, d]).unwrap();
        let (out, _) = vanilla_cross_attention(&mut g, q, k, v).unwrap();
        for i in 0..d {
            for c in 0..d {
                assert!(
                    (g.data(out)[i * d + c] - vdata[i * d + c]).abs() < 1e-9,
                    "row {i} col {c}"
                );
            }
        }
    }

    #[test]
    fn linear_single_key_returns_value() {
        let mut g = Graph::new();
        let q = g.constant(vec![0.3, -0.8, 0.1, 0.9, 0.0, -0.2], &[2, 3]).unwrap();
        let k = g.constant(vec![0.5, 0.5, -1.0], &[1, 3]).unwrap();
        let v = g.constant(vec![7.0, -3.0, 2.0], &[1, 3]).unwrap();
        let out = linear_cross_attention(&mut g, q, k, v).unwrap();
        for r in 0..2 {
            for c in 0..3 {
                assert!((g.data(out)[r * 3 + c] - g.data(v)[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn implicit_similarity_rows_stochastic() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let lq = rng.gen_range(1..=16);
            let lk = rng.gen_range(1..=16);
            let d = rng.gen_range(1..=8);
            let q = rows(&mut rng, lq, d);
            let k = rows(&mut rng, lk, d);
            let sim = implicit_similarity(&q, lq, &k, lk, d);
            for r in 0..lq {
                let row = &sim[r * lk..(r + 1) * lk];
                let s: f64 = row.iter().sum();
                assert!((s - 1.0).abs() < 1e-9, "row sum {s}");
                assert!(row.iter().all(|&v| v >= 0.0));
            }
        }
    }

    #[test]
    fn linear_matches_quadratic_order_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let lq = rng.gen_range(1..=12);
            let lk = rng.gen_range(1..=12);
            let d = rng.gen_range(1..=6);
            let qd = rows(&mut rng, lq, d);
            let kd = rows(&mut rng, lk, d);
            let vd = rows(&mut rng, lk, d);
            let mut g = Graph::new();
            let q = g.constant(qd.clone(), &[lq, d]).unwrap();
            let k = g.constant(kd.clone(), &[lk, d]).unwrap();
            let v = g.constant(vd.clone(), &[lk, d]).unwrap();
            let out = linear_cross_attention(&mut g, q, k, v).unwrap();
            let sim = implicit_similarity(&qd, lq, &kd, lk, d);
            for r in 0..lq {
                for c in 0..d {
                    let mut want = 0.0;
                    for j in 0..lk {
                        want += sim[r * lk + j] * vd[j * d + c];
                    }
                    assert!((g.data(out)[r * d + c] - want).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn linear_never_materializes_lxl() {
        let (lq, lk, d) = (37, 41, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut g = Graph::new();
        let q = g.constant(rows(&mut rng, lq, d), &[lq, d]).unwrap();
        let k = g.constant(rows(&mut rng, lk, d), &[lk, d]).unwrap();
        let v = g.constant(rows(&mut rng, lk, d), &[lk, d]).unwrap();
        let _ = linear_cross_attention(&mut g, q, k, v).unwrap();
        assert!(!g.has_node_with_numel(lq * lk));
        assert!(g.max_node_numel() <= lq.max(lk) * d);

        // the quadratic route does materialize it (inspection contract)
        let mut g2 = Graph::new();
        let q = g2.constant(rows(&mut rng, lq, d), &[lq, d]).unwrap();
        let k = g2.constant(rows(&mut rng, lk, d), &[lk, d]).unwrap();
        let v = g2.constant(rows(&mut rng, lk, d), &[lk, d]).unwrap();
        let _ = vanilla_cross_attention(&mut g2, q, k, v).unwrap();
        assert!(g2.has_node_with_numel(lq * lk));
    }

    #[test]
    fn key_value_joint_permutation_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let (lq, lk, d) = (6, 9, 5);
        let qd = rows(&mut rng, lq, d);
        let kd = rows(&mut rng, lk, d);
        let vd = rows(&mut rng, lk, d);
        let perm: Vec<usize> = {
            let mut p: Vec<usize> = (0..lk).collect();
            for i in (1..lk).rev() {
                let j = rng.gen_range(0..=i);
                p.swap(i, j);
            }
            p
        };
        let permute = |src: &[f64]| {
            let mut out = vec![0.0; src.len()];
            for (dst_row, &src_row) in perm.iter().enumerate() {
                out[dst_row * d..(dst_row + 1) * d].copy_from_slice(&src[src_row * d..(src_row + 1) * d]);
            }
            out
        };
        let eval = |kd: &[f64], vd: &[f64]| {
            let mut g = Graph::new();
            let q = g.constant(qd.clone(), &[lq, d]).unwrap();
            let k = g.constant(kd.to_vec(), &[lk, d]).unwrap();
            let v = g.constant(vd.to_vec(), &[lk, d]).unwrap();
            let out = linear_cross_attention(&mut g, q, k, v).unwrap();
            g.data(out).to_vec()
        };
        let base = eval(&kd, &vd);
        let permuted = eval(&permute(&kd), &permute(&vd));
        for (a, b) in base.iter().zip(&permuted) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn output_is_convex_combination_of_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..50 {
            let lq = rng.gen_range(1..=10);
            let lk = rng.gen_range(1..=10);
            let d = rng.gen_range(1..=6);
            let vd = rows(&mut rng, lk, d);
            let mut g = Graph::new();
            let q = g.constant(rows(&mut rng, lq, d), &[lq, d]).unwrap();
            let k = g.constant(rows(&mut rng, lk, d), &[lk, d]).unwrap();
            let v = g.constant(vd.clone(), &[lk, d]).unwrap();
            let out = linear_cross_attention(&mut g, q, k, v).unwrap();
            for c in 0..d {
                let mut lo = f64::INFINITY;
                let mut hi = f64::NEG_INFINITY;
                for r in 0..lk {
                    lo = lo.min(vd[r * d + c]);
                    hi = hi.max(vd[r * d + c]);
                }
                for r in 0..lq {
                    let o = g.data(out)[r * d + c];
                    assert!(o >= lo - 1e-9 && o <= hi + 1e-9, "{o} outside [{lo}, {hi}]");
                }
            }
        }
    }

    #[test]
    fn mhlca_single_head_reduces_to_linear_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let mut store = ParamStore::new();
        let cfg = AttentionConfig::new(6, 1).unwrap();
        let qe = QEmbed::new(&mut store, &mut rng, "q", 3, 6, 0.01);
        let kv = KvEmbed::new(&mut store, &mut rng, "kv", 4, 6, 0.01);
        let out = DwResBlock::new(&mut store, &mut rng, "o", 6, 0.01);
        let mh = Mhlca::new(cfg, qe.clone(), kv.clone(), out.clone());

        let (h, w) = (3, 4);
        let ydata: Vec<f64> = (0..3 * h * w).map(|_| rng.gen::<f64>() - 0.5).collect();
        let fdata: Vec<f64> = (0..4 * h * w).map(|_| rng.gen::<f64>() - 0.5).collect();

        let mut g = Graph::new();
        let bind = store.bind(&mut g);
        let y = g.constant(ydata.clone(), &[3, h, w]).unwrap();
        let f = g.constant(fdata.clone(), &[4, h, w]).unwrap();
        let got = mh.forward(&mut g, &bind, y, f).unwrap();

        // manual route with the same weights
        let q = qe.forward(&mut g, &bind, y).unwrap();
        let (k, v) = kv.forward(&mut g, &bind, f).unwrap();
        let rows_out = linear_cross_attention(&mut g, q, k, v).unwrap();
        let sp = g.unflatten_spatial(rows_out, h, w).unwrap();
        let want = out.forward(&mut g, &bind, sp).unwrap();
        assert_eq!(g.data(got), g.data(want));
        assert_eq!(g.shape(got), &[6, h, w]);
    }

    #[test]
    fn mhlca_rejects_indivisible_heads() {
        assert!(AttentionConfig::new(7, 2).is_err());
    }

    #[test]
    fn op_count_ratio_matches_model() {
        let r = op_count_ratio(1920, 1080, 48);
        assert!((r - 48.0 / 2_073_600.0).abs() < 1e-18);
        // printed with three decimals this is the 0.002% figure
        assert_eq!(format!("{:.3}%", r * 100.0), "0.002%");
        assert_eq!(op_count_ratio(4, 4, 16), 1.0);
        assert_eq!(op_count(AttentionMode::Vanilla, 2, 2, 3), 2 * 16 * 3);
        assert_eq!(op_count(AttentionMode::Linear, 2, 2, 3), 2 * 4 * 9);
    }

    #[test]
    fn linear_wall_clock_stays_linear_per_query() {
        let d = 24;
        let a = bench_attention(AttentionMode::Linear, 2048, d, 1, 20);
        let b = bench_attention(AttentionMode::Linear, 4096, d, 1, 20);
        let per_query_a = a.wall_ns as f64 / a.l as f64;
        let per_query_b = b.wall_ns as f64 / b.l as f64;
        assert!(
            per_query_b <= per_query_a * 1.3,
            "per-query time grew {}x",
            per_query_b / per_query_a
        );
    }

    #[test]
    fn embedding_shape_and_zero_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mut store = ParamStore::new();
        let qe = QEmbed::new(&mut store, &mut rng, "q", 5, 8, 0.01);
        let mut g = Graph::new();
        let bind = store.bind(&mut g);
        let y = g.constant(vec![0.0; 5 * 6 * 7], &[5, 6, 7]).unwrap();
        let q = qe.forward(&mut g, &bind, y).unwrap();
        assert_eq!(g.shape(q), &[42, 8]);
        assert!(g.data(q).iter().all(|&v| v == 0.0));
    }
}
