//! Reference implementations shared by the integration tests. Each one is
//! written independently of the library code it checks.
#![allow(dead_code)]

use mdmt_core::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Direct six-deep loop cross-correlation; accumulates taps in
/// (input channel, depth, row, column) order.
pub fn naive_conv3d(x: &Tensor, k: &Tensor, stride: usize, pad: usize) -> Tensor {
    let [ci_n, d, h, w] = x.shape()[..] else { panic!("x rank") };
    let [co_n, _, kd, kh, kw] = k.shape()[..] else { panic!("k rank") };
    let out_len = |s: usize, k: usize| (s + 2 * pad - k) / stride + 1;
    let (od, oh, ow) = (out_len(d, kd), out_len(h, kh), out_len(w, kw));
    let xi = |c: usize, z: usize, y: usize, q: usize| x.data()[((c * d + z) * h + y) * w + q];
    let ki = |o: usize, c: usize, a: usize, b: usize, e: usize| {
        k.data()[(((o * ci_n + c) * kd + a) * kh + b) * kw + e]
    };
    let mut out = Vec::with_capacity(co_n * od * oh * ow);
    for o in 0..co_n {
        for z in 0..od {
            for y in 0..oh {
                for q in 0..ow {
                    let mut acc = 0.0;
                    for c in 0..ci_n {
                        for a in 0..kd {
                            for b in 0..kh {
                                for e in 0..kw {
                                    let zz = (z * stride + a) as isize - pad as isize;
                                    let yy = (y * stride + b) as isize - pad as isize;
                                    let qq = (q * stride + e) as isize - pad as isize;
                                    if zz < 0 || yy < 0 || qq < 0 {
                                        continue;
                                    }
                                    let (zz, yy, qq) = (zz as usize, yy as usize, qq as usize);
                                    if zz >= d || yy >= h || qq >= w {
                                        continue;
                                    }
                                    acc += ki(o, c, a, b, e) * xi(c, zz, yy, qq);
                                }
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    Tensor::new(vec![co_n, od, oh, ow], out).unwrap()
}

/// Counts positive-over-negative pairs directly: `(wins + ½·ties) / (P·N)`.
pub fn pairwise_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let mut gt = 0u64;
    let mut ties = 0u64;
    let mut pairs = 0u64;
    for (i, &si) in scores.iter().enumerate() {
        if labels[i] != 1 {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] != 0 {
                continue;
            }
            pairs += 1;
            if si > sj {
                gt += 1;
            } else if si == sj {
                ties += 1;
            }
        }
    }
    (gt as f64 + 0.5 * ties as f64) / pairs as f64
}

/// ROC vertices from sweeping every distinct threshold, highest first
/// (predict positive iff score ≥ t), starting at (0, 0).
pub fn threshold_sweep_points(scores: &[f64], labels: &[u8]) -> Vec<(f64, f64)> {
    let pos = labels.iter().filter(|&&l| l == 1).count() as f64;
    let neg = labels.len() as f64 - pos;
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let mut pts = vec![(0.0, 0.0)];
    for t in thresholds {
        let tp = scores.iter().zip(labels).filter(|(&s, &l)| s >= t && l == 1).count() as f64;
        let fp = scores.iter().zip(labels).filter(|(&s, &l)| s >= t && l == 0).count() as f64;
        pts.push((fp / neg, tp / pos));
    }
    pts
}

/// Random scored instance of size `n` with both classes; `coarse` rounds
/// scores to one decimal so ties are common.
pub fn random_scored(n: usize, coarse: bool, r: &mut ChaCha8Rng) -> (Vec<f64>, Vec<u8>) {
    loop {
        let scores: Vec<f64> = (0..n)
            .map(|_| {
                let s: f64 = r.gen_range(0.0..1.0);
                if coarse { (s * 10.0).round() / 10.0 } else { s }
            })
            .collect();
        let labels: Vec<u8> = (0..n).map(|_| u8::from(r.gen_bool(0.4))).collect();
        if labels.contains(&0) && labels.contains(&1) {
            return (scores, labels);
        }
    }
}

use mdmt_core::losses::{self, DetectionLossConfig};
use mdmt_core::network::{
    classifier_forward, decoder_forward, encoder_forward, ArchConfig, Group, ModelParams,
};
use mdmt_core::tensor::{grad_check, grad_check_coords, Graph, Var};
use mdmt_core::Result;

/// Central-difference check of `bce(classifier) + detection_loss(decoder)`
/// through the whole network, at `n` random parameter coordinates spread
/// over all three groups. Returns the worst relative error.
pub fn composite_grad_error(params: &ModelParams, n: usize, seed: u64) -> f64 {
    let arch: &ArchConfig = &params.arch;
    let mut r = rng(seed);
    let volume = random_tensor(&arch.volume_shape(), &mut r);
    let mask_data: Vec<f64> = (0..arch.voxels()).map(|_| f64::from(r.gen_bool(0.2))).collect();
    let mask = Tensor::new(arch.volume_shape(), mask_data).unwrap();
    let label = Tensor::scalar(1.0);
    let mut worst: f64 = 0.0;
    for i in 0..n {
        let group = Group::ALL[i % 3];
        let tensors = &params.group(group).tensors;
        let idx = r.gen_range(0..tensors.len());
        let coord = r.gen_range(0..tensors[idx].len());
        let f = |g: &mut Graph, x: Var| -> mdmt_core::Result<Var> {
            let mut bound: Vec<Vec<Var>> =
                Group::ALL.iter().map(|&gr| params.bind(g, gr, false)).collect();
            bound[Group::ALL.iter().position(|&gr| gr == group).unwrap()][idx] = x;
            let v = g.constant(volume.clone());
            let o = encoder_forward(g, arch, v, &bound[0])?;
            let y = classifier_forward(g, arch, o, &bound[1])?;
            let s = decoder_forward(g, arch, o, &bound[2])?;
            let lc = losses::bce(g, y, &label)?.var;
            let ld = losses::detection_loss(g, s, &mask, &DetectionLossConfig::default())?.var;
            g.add(lc, ld)
        };
        let err = grad_check_coords(f, &tensors[idx], 1e-5, &[coord]).unwrap();
        worst = worst.max(err);
    }
    worst
}

/// Split and normalized domain pair plus a matching small architecture.
pub fn tiny_domains(
    n1: usize,
    n2: usize,
    seed: u64,
) -> (
    mdmt_core::datagen::DomainDataset,
    mdmt_core::datagen::DomainDataset,
    mdmt_core::network::ArchConfig,
) {
    use mdmt_core::datagen::*;
    let shape = [8, 8, 8];
    let s1 = DomainSpec {
        n_patients: n1,
        shape,
        blob_count: [1, 2],
        blob_radius: [1.0, 1.5],
        metastatic_delta: 2.0,
        positive_fraction: 0.5,
        seed,
        ..DomainSpec::desk_domain1()
    };
    let s2 = DomainSpec {
        domain_id: 2,
        n_patients: n2,
        intensity_offset: 0.5,
        seed: seed + 1,
        ..s1.clone()
    };
    let prep = |s: &DomainSpec, f: [f64; 3]| {
        normalize_with_train_stats(&split_patientwise(&generate_domain(s).unwrap(), f, seed).unwrap()).unwrap()
    };
    let arch = mdmt_core::network::ArchConfig {
        input_shape: shape,
        base_channels: 2,
        num_blocks: 1,
        growth: 2,
        downsample_factor: 2,
        fc_hidden: 4,
        seed: 0,
    };
    (prep(&s1, [0.5, 0.25, 0.25]), prep(&s2, [0.5, 0.25, 0.25]), arch)
}

/// Worst relative gradient error per differentiable op, over `points`
/// random inputs each. Every output coordinate feeds a random linear
/// readout so none escapes the check.
#[rustfmt::skip]
pub fn op_grad_errors(points: usize, seed: u64) -> Vec<(String, f64)> {
    type Op = Box<dyn Fn(&mut Graph, Var) -> Result<Var>>;
    let mut r = rng(seed);
    let vol = [2usize, 2, 2, 4];
    let k = random_tensor(&[2, 2, 3, 3, 3], &mut r);
    let w = random_tensor(&[3, 32], &mut r);
    let other = random_tensor(&vol, &mut r);
    let target =
        Tensor::new(vol.to_vec(), (0..32).map(|i| f64::from(i % 3 == 0)).collect()).unwrap();
    let readout = random_tensor(&[512], &mut r);
    // A random linear readout keeps every output coordinate in play.
    let weigh = move |g: &mut Graph, y: Var| -> Result<Var> {
        let shape = g.value(y).shape().to_vec();
        let n = g.value(y).len();
        let wv = g.constant(Tensor::new(shape, readout.data()[..n].to_vec())?);
        let m = g.mul(y, wv)?;
        g.sum(m)
    };
    let c = |t: &Tensor| t.clone();
    let cases: Vec<(&str, Vec<usize>, Op)> = vec![
        ("conv3d", vol.to_vec(), Box::new({ let k = c(&k); move |g, x| { let kv = g.constant(k.clone()); g.conv3d(x, kv, 1, 1) } })),
        ("conv3d stride 2", vol.to_vec(), Box::new({ let k = c(&k); move |g, x| { let kv = g.constant(k.clone()); g.conv3d(x, kv, 2, 1) } })),
        ("conv3d kernel", vec![2, 2, 2, 2, 2], Box::new({ let o = c(&other); move |g, kv| { let x = g.constant(o.clone()); g.conv3d(x, kv, 1, 0) } })),
        ("channel_bias", vol.to_vec(), Box::new(|g, x| { let b = g.constant(Tensor::from_vec(vec![0.3, -0.2])?); g.channel_bias(x, b) })),
        ("channel_bias bias", vec![2], Box::new({ let o = c(&other); move |g, b| { let x = g.constant(o.clone()); g.channel_bias(x, b) } })),
        ("avg_pool3d", vol.to_vec(), Box::new(|g, x| g.avg_pool3d(x, 2))),
        ("upsample_nearest3d", vol.to_vec(), Box::new(|g, x| g.upsample_nearest3d(x, 2))),
        ("concat_channels", vol.to_vec(), Box::new({ let o = c(&other); move |g, x| { let cv = g.constant(o.clone()); g.concat_channels(&[cv, x, x]) } })),
        ("slice_channels", vol.to_vec(), Box::new(|g, x| g.slice_channels(x, 1, 1))),
        ("affine", vol.to_vec(), Box::new({ let w = c(&w); move |g, x| { let v = g.flatten(x)?; let wv = g.constant(w.clone()); let b = g.constant(Tensor::from_vec(vec![0.1, 0.2, 0.3])?); g.affine(v, wv, b) } })),
        ("affine weight", vec![3, 32], Box::new({ let o = c(&other); move |g, wv| { let x = g.constant(o.clone().reshape(vec![32])?); let b = g.constant(Tensor::from_vec(vec![0.1, 0.2, 0.3])?); g.affine(x, wv, b) } })),
        ("sigmoid", vol.to_vec(), Box::new(|g, x| g.sigmoid(x))),
        ("silu", vol.to_vec(), Box::new(|g, x| g.silu(x))),
        ("ln", vol.to_vec(), Box::new(|g, x| { let s = g.sigmoid(x)?; g.ln(s) })),
        ("add sub mul", vol.to_vec(), Box::new({ let o = c(&other); move |g, x| { let cv = g.constant(o.clone()); let a = g.add(x, cv)?; let b = g.sub(a, x)?; let m = g.mul(a, x)?; g.add(b, m) } })),
        ("scale add_scalar", vol.to_vec(), Box::new(|g, x| { let s = g.scale(x, -1.7)?; g.add_scalar(s, 0.4) })),
        ("mean", vol.to_vec(), Box::new(|g, x| g.mean(x))),
        ("bce", vol.to_vec(), Box::new({ let t = c(&target); move |g, x| { let p = g.sigmoid(x)?; g.bce(p, &t) } })),
        ("soft_dice", vol.to_vec(), Box::new({ let t = c(&target); move |g, x| { let p = g.sigmoid(x)?; g.soft_dice(p, &t, 1.0) } })),
    ];
    cases
        .iter()
        .map(|(name, shape, op)| {
            let worst = (0..points)
                .map(|_| {
                    let x = random_tensor(shape, &mut r);
                    grad_check(|g, x| { let y = op(g, x)?; weigh(g, y) }, &x, 1e-5).unwrap()
                })
                .fold(0.0, f64::max);
            (name.to_string(), worst)
        })
        .collect()}
