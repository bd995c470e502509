#![allow(dead_code)]

use hirm::encoder::{BlockParam, EncoderConfig, EncoderParams, ParamSlot, TextEncoder};
use hirm::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

pub type Mat = Vec<Vec<f64>>;

/// Activations computed with plain loops, one row per token.
pub struct OracleTrace {
    pub attn_out: Vec<Mat>,
    pub mlp_hidden: Vec<Mat>,
    pub mlp_out: Vec<Mat>,
    pub block_out: Vec<Mat>,
    pub final_out: Mat,
}

fn mat(t: &Tensor) -> Mat {
    t.rows().map(|r| r.to_vec()).collect()
}

fn affine(x: &Mat, w: &Mat, b: &[f64]) -> Mat {
    x.iter()
        .map(|row| {
            (0..b.len())
                .map(|j| b[j] + row.iter().enumerate().map(|(k, v)| v * w[k][j]).sum::<f64>())
                .collect()
        })
        .collect()
}

fn layer_norm(x: &Mat, g: &[f64], b: &[f64], eps: f64) -> Mat {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mu = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
            let s = (var + eps).sqrt();
            row.iter().enumerate().map(|(j, v)| (v - mu) / s * g[j] + b[j]).collect()
        })
        .collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x * x * x)).tanh())
}

fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(r, s)| r.iter().zip(s).map(|(x, y)| x + y).collect())
        .collect()
}

pub fn oracle_forward(params: &EncoderParams, ids: &[usize]) -> OracleTrace {
    let cfg = params.config();
    let v = |slot: ParamSlot| params.get(slot).data().to_vec();
    let m = |slot: ParamSlot| mat(params.get(slot));
    let tok = m(ParamSlot::TokenEmbedding);
    let pos = m(ParamSlot::PositionEmbedding);
    let t = ids.len();
    let d = cfg.model_dim;
    let dh = d / cfg.num_heads;

    let mut x: Mat = (0..t)
        .map(|i| (0..d).map(|j| tok[ids[i]][j] + pos[i][j]).collect())
        .collect();
    let mut out = OracleTrace {
        attn_out: vec![],
        mlp_hidden: vec![],
        mlp_out: vec![],
        block_out: vec![],
        final_out: vec![],
    };
    for l in 1..=cfg.num_blocks {
        let p = |bp| ParamSlot::Block(l, bp);
        let a = layer_norm(&x, &v(p(BlockParam::Ln1Gain)), &v(p(BlockParam::Ln1Bias)), cfg.layernorm_eps);
        let q = affine(&a, &m(p(BlockParam::WQ)), &v(p(BlockParam::BQ)));
        let k = affine(&a, &m(p(BlockParam::WK)), &v(p(BlockParam::BK)));
        let vv = affine(&a, &m(p(BlockParam::WV)), &v(p(BlockParam::BV)));
        let mut merged = vec![vec![0.0; d]; t];
        for h in 0..cfg.num_heads {
            let cols = h * dh..(h + 1) * dh;
            for i in 0..t {
                let scores: Vec<f64> = (0..=i)
                    .map(|j| {
                        cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dh as f64).sqrt()
                    })
                    .collect();
                let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
                let z: f64 = e.iter().sum();
                for c in cols.clone() {
                    merged[i][c] = (0..=i).map(|j| e[j] / z * vv[j][c]).sum();
                }
            }
        }
        let attn = affine(&merged, &m(p(BlockParam::WOut)), &v(p(BlockParam::BOut)));
        let mid = add(&x, &attn);
        let b = layer_norm(&mid, &v(p(BlockParam::Ln2Gain)), &v(p(BlockParam::Ln2Bias)), cfg.layernorm_eps);
        let hidden: Mat = affine(&b, &m(p(BlockParam::Fc1W)), &v(p(BlockParam::Fc1B)))
            .into_iter()
            .map(|r| r.into_iter().map(gelu).collect())
            .collect();
        let mlp = affine(&hidden, &m(p(BlockParam::Fc2W)), &v(p(BlockParam::Fc2B)));
        x = add(&mid, &mlp);
        out.attn_out.push(attn);
        out.mlp_hidden.push(hidden);
        out.mlp_out.push(mlp);
        out.block_out.push(x.clone());
    }
    out.final_out = layer_norm(&x, &v(ParamSlot::FinalLnGain), &v(ParamSlot::FinalLnBias), cfg.layernorm_eps);
    out
}

pub fn max_diff(a: &Tensor, b: &Mat) -> f64 {
    a.rows()
        .zip(b)
        .flat_map(|(r, s)| r.iter().zip(s).map(|(x, y)| (x - y).abs()))
        .fold(0.0, f64::max)
}

/// A small encoder whose every parameter, gains and biases included, is
/// drawn uniformly so that no term of the forward pass is trivially zero.
pub fn random_encoder(rng: &mut ChaCha20Rng) -> TextEncoder {
    let heads = [1usize, 2, 4][rng.random_range(0..3)];
    let dh = rng.random_range(1..=3);
    let cfg = EncoderConfig {
        num_blocks: rng.random_range(2..=4),
        model_dim: heads * dh,
        num_heads: heads,
        ff_dim: rng.random_range(2..=12),
        max_tokens: rng.random_range(2..=8),
        init_seed: rng.random(),
        ..EncoderConfig::default()
    };
    let corpus = ["alpha beta gamma delta epsilon zeta eta theta"];
    let enc = TextEncoder::init(&cfg, &corpus).unwrap();
    let mut params = enc.params.clone();
    for i in 0..params.config().num_params() {
        let id = hirm::tensor::ParamId(i);
        let t = params.by_id_mut(id);
        for v in t.data_mut() {
            *v += rng.random_range(-0.5..0.5);
        }
    }
    enc.with_params(params)
}

pub fn random_prompt(rng: &mut ChaCha20Rng) -> String {
    const WORDS: [&str; 9] = ["alpha", "beta", "gamma", "delta", "epsilon", "zeta", "eta", "theta", "unseen"];
    let n = rng.random_range(0..6);
    (0..n).map(|_| WORDS[rng.random_range(0..WORDS.len())]).collect::<Vec<_>>().join(" ")
}

pub fn rng(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

pub const TARGET: &str = "van gogh";
pub const NON_TARGETS: [&str; 5] = [
    "a photo of a dog",
    "red sports car",
    "mountain lake sunrise",
    "bowl of fruit",
    "city street night",
];

pub fn toy_corpus() -> Vec<String> {
    std::iter::once(TARGET).chain(NON_TARGETS).map(String::from).collect()
}
