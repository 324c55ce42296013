//! Acceptance suite. Runs every criterion in sequence, prints one PASS/FAIL
//! line each, and exits non-zero if any failed.
//!
//! Expected values come from oracles written here, independent of the
//! library's own arithmetic.

use std::alloc::{GlobalAlloc, Layout, System};
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::{Duration, Instant};

use mergeforge::checkpoint::{write_checkpoint, CheckpointWriter, TensorLayout};
use mergeforge::experiment::norms::delta_norm;
use mergeforge::experiment::report::format_cell;
use mergeforge::experiment::{
    interference_report, merged_model_id, sample_subsets, EvalRecord, EvalResults, Reference,
};
use mergeforge::merge::model_stock::model_stock_merge;
use mergeforge::merge::{merge_checkpoints, merge_tensor, MergeMethod, MergeRecipe};
use mergeforge::pipeline::{run_merge, MergeJob};
use mergeforge::subspace::{boost_values, clamp_plan, iso_c_tensor, svd, tsv_factors};
use mergeforge::{Checkpoint, Dtype, TensorRecord};
use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct CountingAlloc;

static CURRENT: AtomicUsize = AtomicUsize::new(0);
static PEAK: AtomicUsize = AtomicUsize::new(0);

unsafe impl GlobalAlloc for CountingAlloc {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let p = System.alloc(layout);
        if !p.is_null() {
            let now = CURRENT.fetch_add(layout.size(), Ordering::Relaxed) + layout.size();
            PEAK.fetch_max(now, Ordering::Relaxed);
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        System.dealloc(ptr, layout);
        CURRENT.fetch_sub(layout.size(), Ordering::Relaxed);
    }

    unsafe fn realloc(&self, ptr: *mut u8, layout: Layout, new_size: usize) -> *mut u8 {
        let p = System.realloc(ptr, layout, new_size);
        if !p.is_null() {
            if new_size >= layout.size() {
                let now = CURRENT.fetch_add(new_size - layout.size(), Ordering::Relaxed) + new_size
                    - layout.size();
                PEAK.fetch_max(now, Ordering::Relaxed);
            } else {
                CURRENT.fetch_sub(layout.size() - new_size, Ordering::Relaxed);
            }
        }
        p
    }
}

#[global_allocator]
static ALLOC: CountingAlloc = CountingAlloc;

type Outcome = Result<String, String>;
type Criterion = (&'static str, Option<Duration>, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($msg)+));
        }
    };
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn record(shape: &[usize], dtype: Dtype, values: Vec<f32>) -> TensorRecord {
    TensorRecord::new(shape.to_vec(), dtype, values).unwrap()
}

fn ckpt(tensors: Vec<(&str, TensorRecord)>) -> Checkpoint {
    Checkpoint::from_records(
        tensors
            .into_iter()
            .map(|(n, r)| (n.to_string(), r))
            .collect(),
    )
}

fn frobenius(m: &DMatrix<f64>) -> f64 {
    m.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn gaussian_matrix(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| r.gen_range(-1.0..1.0))
}

// 1 ------------------------------------------------------------------------

/// Values exactly representable in `dtype` with magnitudes in [2^-8, 4] or
/// zero, so every f32 difference and sum between two of them is exact.
fn exact_values(r: &mut ChaCha8Rng, n: usize, dtype: Dtype) -> Vec<f32> {
    (0..n)
        .map(|_| {
            let x: f32 = r.gen_range(-4.0..4.0);
            let q = match dtype {
                Dtype::F32 => (x * 4096.0).round() / 4096.0,
                _ => dtype.quantize(x).unwrap(),
            };
            if q.abs() < 1.0 / 256.0 {
                0.0
            } else {
                q
            }
        })
        .collect()
}

fn ta_identity() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut r = rng(1);
    let dtypes = [Dtype::BF16, Dtype::F16, Dtype::F32];
    let shapes: Vec<Vec<usize>> = (0..20)
        .map(|i| match i % 4 {
            0 => vec![r.gen_range(8..48), r.gen_range(8..48)],
            1 => vec![r.gen_range(8..64)],
            2 => vec![2, r.gen_range(2..8), r.gen_range(2..8)],
            _ => vec![r.gen_range(1..32), r.gen_range(1..32)],
        })
        .collect();
    let build = |r: &mut ChaCha8Rng, path: &Path| {
        let mut m = BTreeMap::new();
        for (i, shape) in shapes.iter().enumerate() {
            let dtype = dtypes[i % 3];
            let n = shape.iter().product();
            m.insert(
                format!("layers.{i:02}.param"),
                record(shape, dtype, exact_values(r, n, dtype)),
            );
        }
        // write_checkpoint takes one dtype; keep them mixed.
        let layout = m
            .iter()
            .map(|(n, rec)| TensorLayout {
                name: n.clone(),
                shape: rec.shape.clone(),
                dtype: rec.dtype,
            })
            .collect();
        let mut w = CheckpointWriter::create(path, layout, &BTreeMap::new()).unwrap();
        for (n, rec) in &m {
            w.write_tensor(n, &rec.values).unwrap();
        }
        w.finish().unwrap();
    };
    let base = dir.path().join("base.safetensors");
    let ft = dir.path().join("ft.safetensors");
    let out = dir.path().join("out.safetensors");
    build(&mut r, &base);
    build(&mut r, &ft);

    let job = MergeJob::new(
        &base,
        vec![ft.clone()],
        MergeRecipe::new(MergeMethod::TaskArithmetic),
        &out,
    );
    run_merge(&job, |_| {}).map_err(|e| e.to_string())?;

    let want = Checkpoint::open(&ft).map_err(|e| e.to_string())?;
    let got = Checkpoint::open(&out).map_err(|e| e.to_string())?;
    ensure!(got.len() == 20, "expected 20 tensors, got {}", got.len());
    let mut compared = 0usize;
    for name in want.names() {
        let (a, b) = (want.load(name).unwrap(), got.load(name).unwrap());
        ensure!(
            a.dtype == b.dtype && a.shape == b.shape,
            "{name}: layout changed"
        );
        let same = a
            .values
            .iter()
            .zip(&b.values)
            .all(|(x, y)| x.to_bits() == y.to_bits());
        ensure!(same, "{name}: values differ");
        compared += a.values.len();
    }
    Ok(format!(
        "20 tensors, {compared} values bit-identical (bf16/f16/f32)"
    ))
}

// 2 ------------------------------------------------------------------------

/// Brute-force TIES: sort for the trim, f64 for the vote and the average.
fn ties_oracle(deltas: &[Vec<f32>], alphas: &[f32], keep_num: usize, keep_den: usize) -> Vec<f32> {
    let m = deltas[0].len();
    let keep = (keep_num * m).div_ceil(keep_den).max(1).min(m);
    let trimmed: Vec<Vec<f64>> = deltas
        .iter()
        .map(|d| {
            let mut order: Vec<usize> = (0..m).collect();
            order.sort_by(|&a, &b| d[b].abs().partial_cmp(&d[a].abs()).unwrap().then(a.cmp(&b)));
            let mut t = vec![0.0f64; m];
            for &i in &order[..keep] {
                t[i] = d[i] as f64;
            }
            t
        })
        .collect();
    (0..m)
        .map(|j| {
            let total: f64 = trimmed.iter().map(|t| t[j]).sum();
            if total == 0.0 {
                return 0.0;
            }
            let agreeing: f64 = trimmed
                .iter()
                .zip(alphas)
                .filter(|(t, _)| t[j] != 0.0 && (t[j] > 0.0) == (total > 0.0))
                .map(|(t, &a)| a as f64 * t[j])
                .sum();
            (agreeing / deltas.len() as f64) as f32
        })
        .collect()
}

fn ties_oracle_equivalence() -> Outcome {
    let mut r = rng(2);
    let densities = [
        (1, 10),
        (1, 5),
        (1, 4),
        (1, 3),
        (1, 2),
        (2, 3),
        (3, 4),
        (1, 1),
    ];
    let mut nonzero = 0usize;
    for case in 0..1000 {
        let n = r.gen_range(1..=5);
        let m = r.gen_range(1..=16);
        // Multiples of 1/8 in [-4, 4], with repeats so magnitude ties occur.
        let deltas: Vec<Vec<f32>> = (0..n)
            .map(|_| {
                (0..m)
                    .map(|_| r.gen_range(-32i32..=32) as f32 / 8.0)
                    .collect()
            })
            .collect();
        let alphas: Vec<f32> = (0..n)
            .map(|_| [0.5f32, 1.0, 2.0][r.gen_range(0..3)])
            .collect();
        let (p, q) = densities[r.gen_range(0..densities.len())];
        let recipe = MergeRecipe::new(MergeMethod::Ties)
            .with_trim_density(p as f64 / q as f64)
            .with_alphas(alphas.clone());

        let mut out = vec![0.0f32; m];
        merge_tensor("t", &[m], &mut out, deltas.clone(), &recipe).map_err(|e| e.to_string())?;
        let want = ties_oracle(&deltas, &alphas, p, q);
        ensure!(
            out == want,
            "case {case}: n={n} density={p}/{q} deltas={deltas:?} alphas={alphas:?}\n got {out:?}\nwant {want:?}"
        );
        nonzero += want.iter().filter(|v| **v != 0.0).count();
    }
    Ok(format!("1000 cases identical ({nonzero} nonzero outputs)"))
}

// 3 ------------------------------------------------------------------------

fn model_stock_formula() -> Outcome {
    let mut r = rng(3);
    let shapes: [&[usize]; 3] = [&[6, 5], &[7], &[3, 4]];
    let names = ["a.weight", "b.bias", "c.weight"];
    let random = |r: &mut ChaCha8Rng, n: usize, s: f32| {
        (0..n).map(|_| r.gen_range(-s..s)).collect::<Vec<f32>>()
    };
    let model = |values: Vec<Vec<f32>>| {
        ckpt(
            names
                .iter()
                .zip(shapes)
                .zip(values)
                .map(|((n, s), v)| (*n, record(s, Dtype::F32, v)))
                .collect(),
        )
    };
    let base_vals: Vec<Vec<f32>> = shapes
        .iter()
        .map(|s| random(&mut r, s.iter().product(), 1.0))
        .collect();
    let base = model(base_vals.clone());

    // Identical variants: t = 1, output is the (common) average.
    let v: Vec<Vec<f32>> = base_vals
        .iter()
        .map(|b| b.iter().map(|x| x + r.gen_range(-0.5..0.5)).collect())
        .collect();
    let (out, stats) = model_stock_merge(
        &base,
        &[model(v.clone()), model(v.clone()), model(v.clone())],
    )
    .map_err(|e| e.to_string())?;
    for s in &stats {
        ensure!(
            (s.t - 1.0).abs() < 1e-9,
            "{}: t = {} for identical variants",
            s.tensor,
            s.t
        );
    }
    for (i, name) in names.iter().enumerate() {
        let got = out.load(name).unwrap().values;
        ensure!(
            got.iter().zip(&v[i]).all(|(g, w)| (g - w).abs() <= 1e-6),
            "{name}: not W_avg"
        );
    }

    // Orthogonal deltas (disjoint supports): t = 0, output is the base.
    let ortho: Vec<Checkpoint> = (0..2)
        .map(|k| {
            model(
                base_vals
                    .iter()
                    .map(|b| {
                        b.iter()
                            .enumerate()
                            .map(|(j, x)| if j % 2 == k { x + 0.25 } else { *x })
                            .collect()
                    })
                    .collect(),
            )
        })
        .collect();
    let (out, _) = model_stock_merge(&base, &ortho).map_err(|e| e.to_string())?;
    for (i, name) in names.iter().enumerate() {
        let got = out.load(name).unwrap().values;
        ensure!(
            got.iter()
                .zip(&base_vals[i])
                .all(|(g, w)| (g - w).abs() <= 1e-6),
            "{name}: not the base"
        );
    }

    // Random angles against an f64 oracle.
    let mut checked = 0usize;
    for trial in 0..50 {
        let n = r.gen_range(2..=6);
        let shared: Vec<Vec<f32>> = shapes
            .iter()
            .map(|s| random(&mut r, s.iter().product(), 1.0))
            .collect();
        let mix: f32 = r.gen_range(0.0..1.5);
        let vars: Vec<Vec<Vec<f32>>> = (0..n)
            .map(|_| {
                base_vals
                    .iter()
                    .zip(&shared)
                    .map(|(b, s)| {
                        b.iter()
                            .zip(s)
                            .map(|(x, y)| x + mix * y + r.gen_range(-1.0f32..1.0))
                            .collect()
                    })
                    .collect()
            })
            .collect();
        let ckpts: Vec<Checkpoint> = vars.iter().cloned().map(model).collect();
        let (out, _) = model_stock_merge(&base, &ckpts).map_err(|e| e.to_string())?;
        for (i, name) in names.iter().enumerate() {
            let b: Vec<f64> = base_vals[i].iter().map(|x| *x as f64).collect();
            let ds: Vec<Vec<f64>> = vars
                .iter()
                .map(|v| v[i].iter().zip(&b).map(|(x, y)| *x as f64 - y).collect())
                .collect();
            let mut cos_sum = 0.0;
            let mut pairs = 0.0;
            for a in 0..n {
                for c in a + 1..n {
                    let dot: f64 = ds[a].iter().zip(&ds[c]).map(|(x, y)| x * y).sum();
                    let na: f64 = ds[a].iter().map(|x| x * x).sum::<f64>().sqrt();
                    let nc: f64 = ds[c].iter().map(|x| x * x).sum::<f64>().sqrt();
                    cos_sum += dot / (na * nc);
                    pairs += 1.0;
                }
            }
            let cos = cos_sum / pairs;
            let t = n as f64 * cos / (1.0 + (n as f64 - 1.0) * cos);
            let got = out.load(name).unwrap().values;
            for (j, g) in got.iter().enumerate() {
                let avg = vars.iter().map(|v| v[i][j] as f64).sum::<f64>() / n as f64;
                let want = t * avg + (1.0 - t) * b[j];
                ensure!(
                    (*g as f64 - want).abs() <= 1e-6 * want.abs().max(1.0),
                    "trial {trial} {name}[{j}]: {g} vs {want} (cos {cos:.4})"
                );
                checked += 1;
            }
        }
    }
    Ok(format!(
        "t=1 and t=0 cases hold; {checked} random-angle values within 1e-6"
    ))
}

// 4 ------------------------------------------------------------------------

fn max_gram_error(m: &DMatrix<f64>) -> f64 {
    // Checks columns if tall, rows if wide.
    let g = if m.ncols() <= m.nrows() {
        m.transpose() * m
    } else {
        m * m.transpose()
    };
    let mut worst = 0.0f64;
    for i in 0..g.nrows() {
        for j in 0..g.ncols() {
            worst = worst.max((g[(i, j)] - if i == j { 1.0 } else { 0.0 }).abs());
        }
    }
    worst
}

fn spectrum_of(rows: usize, cols: usize, values: &[f32]) -> Vec<f64> {
    let m = DMatrix::from_fn(rows, cols, |i, j| values[i * cols + j] as f64);
    let mut s: Vec<f64> = m.singular_values().iter().copied().collect();
    s.sort_by(|a, b| b.partial_cmp(a).unwrap());
    s
}

fn spectral_properties() -> Outcome {
    let mut r = rng(4);
    let (mut worst_rec, mut worst_flat, mut worst_boost, mut worst_orth) =
        (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for case in 0..200 {
        let rows = r.gen_range(1..=64);
        let cols = r.gen_range(1..=48);
        let a = gaussian_matrix(&mut r, rows, cols);

        // Reconstruction, by explicit sums.
        let f = svd(&a).map_err(|e| e.to_string())?;
        let k = f.rank();
        ensure!(k == rows.min(cols), "case {case}: rank {k}");
        ensure!(
            f.sigmas.windows(2).all(|w| w[0] >= w[1]) && f.sigmas[k - 1] >= 0.0,
            "case {case}: order"
        );
        let mut err = 0.0f64;
        for i in 0..rows {
            for j in 0..cols {
                let x: f64 = (0..k)
                    .map(|t| f.u[(i, t)] * f.sigmas[t] * f.v[(j, t)])
                    .sum();
                err += (x - a[(i, j)]).powi(2);
            }
        }
        let rec = err.sqrt() / frobenius(&a);
        worst_rec = worst_rec.max(rec);
        ensure!(rec <= 1e-4, "case {case}: reconstruction error {rec:e}");
        worst_orth = worst_orth
            .max(max_gram_error(&f.u))
            .max(max_gram_error(&f.v));

        // Iso-C: flat output spectrum.
        let values: Vec<f32> = a.transpose().iter().map(|x| *x as f32).collect();
        let mut out = vec![0.0f32; rows * cols];
        iso_c_tensor(&[rows, cols], &mut out, &[&values], &[1.0], 1.0)
            .map_err(|e| e.to_string())?;
        let s = spectrum_of(rows, cols, &out);
        let spread = (s[0] - s[k - 1]) / s[0];
        worst_flat = worst_flat.max(spread);
        ensure!(spread <= 1e-4, "case {case}: iso-c spread {spread:e}");

        // Boosting: clamp rule from the input spectrum.
        let beta: f64 = if case % 10 == 0 {
            [0.0, 1.0][case / 10 % 2]
        } else {
            r.gen_range(0.0..1.0)
        };
        let sig_in = spectrum_of(rows, cols, &values);
        let total: f64 = sig_in.iter().sum();
        let mut run = 0.0;
        let mut cutoff = k;
        for (j, s) in sig_in.iter().enumerate() {
            run += s;
            if run / total >= beta || j == k - 1 {
                cutoff = j + 1;
                break;
            }
        }
        let expected: Vec<f64> = (0..k).map(|j| sig_in[j.min(cutoff - 1)]).collect();
        let boosted =
            boost_values(&[rows, cols], values.clone(), beta).map_err(|e| e.to_string())?;
        let got = spectrum_of(rows, cols, &boosted);
        for (g, e) in got.iter().zip(&expected) {
            let d = (g - e).abs() / expected[0];
            worst_boost = worst_boost.max(d);
            ensure!(
                d <= 1e-4,
                "case {case}: boosted {got:?} vs {expected:?} (beta {beta})"
            );
        }

        // TSV aligned factors.
        let tasks = r.gen_range(1..=4);
        let mats: Vec<DMatrix<f64>> = (0..tasks)
            .map(|_| gaussian_matrix(&mut r, rows, cols))
            .collect();
        let tf = tsv_factors(&mats).map_err(|e| e.to_string())?;
        let e = max_gram_error(&tf.u_perp).max(max_gram_error(&tf.v_perp));
        worst_orth = worst_orth.max(e);
        ensure!(
            e <= 1e-5,
            "case {case}: tsv factors {}x{} off by {e:e}",
            rows,
            cols
        );
    }
    Ok(format!(
        "200 matrices; worst: recon {worst_rec:.1e}, iso spread {worst_flat:.1e}, boost {worst_boost:.1e}, orth {worst_orth:.1e}"
    ))
}

// 5 ------------------------------------------------------------------------

fn tsv_single_task() -> Outcome {
    let mut r = rng(5);
    let layers: [(&str, &[usize]); 4] = [
        ("l0.weight", &[32, 24]),
        ("l0.bias", &[32]),
        ("l1.weight", &[16, 32]),
        ("l1.bias", &[16]),
    ];
    let make = |r: &mut ChaCha8Rng| {
        ckpt(
            layers
                .iter()
                .map(|(n, s)| {
                    let v = (0..s.iter().product())
                        .map(|_| r.gen_range(-1.0f32..1.0))
                        .collect();
                    (*n, record(s, Dtype::F32, v))
                })
                .collect(),
        )
    };
    let base = make(&mut r);
    let ft = make(&mut r);
    let tsv = merge_checkpoints(
        &base,
        std::slice::from_ref(&ft),
        &MergeRecipe::new(MergeMethod::TsvMerge),
    )
    .map_err(|e| e.to_string())?
    .merged;
    let ta = merge_checkpoints(&base, &[ft], &MergeRecipe::new(MergeMethod::TaskArithmetic))
        .map_err(|e| e.to_string())?
        .merged;
    let mut worst = 0.0f64;
    for (name, _) in layers {
        let (a, b, w0) = (
            tsv.load(name).unwrap().values,
            ta.load(name).unwrap().values,
            base.load(name).unwrap().values,
        );
        let diff: f64 = a
            .iter()
            .zip(&b)
            .map(|(x, y)| (*x as f64 - *y as f64).powi(2))
            .sum::<f64>()
            .sqrt();
        let delta: f64 = b
            .iter()
            .zip(&w0)
            .map(|(x, y)| (*x as f64 - *y as f64).powi(2))
            .sum::<f64>()
            .sqrt();
        let rel = diff / delta;
        worst = worst.max(rel);
        ensure!(rel <= 1e-4, "{name}: relative difference {rel:e}");
    }
    Ok(format!("2 layers; worst relative difference {worst:.1e}"))
}

// 6 ------------------------------------------------------------------------

fn hand_traced() -> Outcome {
    let recipe = MergeRecipe::new(MergeMethod::Ties).with_trim_density(1.0);
    let mut w = vec![0.5f32, 0.25];
    merge_tensor(
        "t",
        &[2],
        &mut w,
        vec![vec![1.5, -1.75], vec![3.5, 1.25]],
        &recipe,
    )
    .map_err(|e| e.to_string())?;
    ensure!(w == vec![2.5, -0.75], "ties: {w:?}");

    let mut iso = vec![0.0f32; 4];
    iso_c_tensor(&[2, 2], &mut iso, &[&[3.0, 0.0, 0.0, 1.0]], &[1.0], 1.0)
        .map_err(|e| e.to_string())?;
    ensure!(iso == vec![2.0, 0.0, 0.0, 2.0], "iso-c: {iso:?}");

    let plan = clamp_plan(&[4.0, 3.0, 2.0, 1.0], 0.2);
    ensure!(
        plan.clamped == vec![4.0, 4.0, 4.0, 4.0],
        "boost: {:?}",
        plan.clamped
    );
    ensure!(
        plan.cumulative_energy == vec![0.4, 0.7, 0.9, 1.0],
        "energy: {:?}",
        plan.cumulative_energy
    );
    let diag = vec![
        4.0f32, 0.0, 0.0, 0.0, 0.0, 3.0, 0.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 0.0, 1.0,
    ];
    let boosted = boost_values(&[4, 4], diag, 0.2).map_err(|e| e.to_string())?;
    let want: Vec<f32> = (0..16)
        .map(|i| if i % 5 == 0 { 4.0 } else { 0.0 })
        .collect();
    ensure!(boosted == want, "boosted diag: {boosted:?}");
    Ok("ties [2,-1], iso-c diag(2,2), boost (4,4,4,4) exact".into())
}

// 7 ------------------------------------------------------------------------

fn norm_law() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut r = rng(7);
    let (rows, cols, bias) = (12usize, 10usize, 8usize);
    let dim = rows * cols + bias;
    // Gram-Schmidt in f64 over the flattened parameter vector.
    let mut basis: Vec<Vec<f64>> = Vec::new();
    while basis.len() < 8 {
        let mut v: Vec<f64> = (0..dim).map(|_| r.gen_range(-1.0..1.0)).collect();
        for b in &basis {
            let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        basis.push(v.into_iter().map(|x| x / n).collect());
    }
    let base_flat: Vec<f32> = (0..dim).map(|_| r.gen_range(-0.1f32..0.1)).collect();
    let save = |flat: &[f32], path: &Path| {
        let mut m = BTreeMap::new();
        m.insert(
            "proj.weight".to_string(),
            record(&[rows, cols], Dtype::F32, flat[..rows * cols].to_vec()),
        );
        m.insert(
            "proj.bias".to_string(),
            record(&[bias], Dtype::F32, flat[rows * cols..].to_vec()),
        );
        write_checkpoint(&m, path, Dtype::F32).unwrap();
    };
    let base = dir.path().join("base.safetensors");
    save(&base_flat, &base);
    let variants: Vec<_> = basis
        .iter()
        .enumerate()
        .map(|(i, b)| {
            let flat: Vec<f32> = base_flat
                .iter()
                .zip(b)
                .map(|(x, d)| (*x as f64 + d) as f32)
                .collect();
            let p = dir.path().join(format!("ft{i}.safetensors"));
            save(&flat, &p);
            p
        })
        .collect();

    let base_ck = Checkpoint::open(&base).unwrap();
    let mut worst = 0.0f64;
    for n in 1..=8 {
        let out = dir.path().join(format!("ta{n}.safetensors"));
        let job = MergeJob::new(
            &base,
            variants[..n].to_vec(),
            MergeRecipe::new(MergeMethod::TaskArithmetic),
            &out,
        );
        let summary = run_merge(&job, |_| {}).map_err(|e| e.to_string())?;
        let measured =
            delta_norm(&Checkpoint::open(&out).unwrap(), &base_ck).map_err(|e| e.to_string())?;
        let want = (n as f64).sqrt();
        for got in [summary.delta_norm, measured] {
            worst = worst.max((got - want).abs());
            ensure!((got - want).abs() <= 1e-6, "n={n}: norm {got} vs {want}");
        }
    }
    Ok(format!("n=1..8 match sqrt(n); worst deviation {worst:.1e}"))
}

// 8 ------------------------------------------------------------------------

fn protocol_fidelity() -> Outcome {
    let ids: Vec<String> = (1..=12).map(|i| format!("ft{i:02}")).collect();
    let sizes = [2, 4, 6, 8, 10, 12];
    let a = sample_subsets(&ids, &sizes, 15, 2024).map_err(|e| e.to_string())?;
    let b = sample_subsets(&ids, &sizes, 15, 2024).map_err(|e| e.to_string())?;
    ensure!(
        a.to_json().as_bytes() == b.to_json().as_bytes(),
        "serializations differ"
    );

    let pool: BTreeSet<&String> = ids.iter().collect();
    let mut counts = Vec::new();
    for &size in &sizes {
        let subsets = a.subsets.get(&size).ok_or(format!("size {size} missing"))?;
        counts.push(subsets.len());
        let distinct: BTreeSet<&Vec<String>> = subsets.iter().collect();
        ensure!(
            distinct.len() == subsets.len(),
            "size {size}: repeated subsets"
        );
        for s in subsets {
            let members: BTreeSet<&String> = s.iter().collect();
            ensure!(
                s.len() == size && members.len() == size,
                "size {size}: bad subset {s:?}"
            );
            ensure!(
                members.iter().all(|m| pool.contains(m)),
                "size {size}: foreign id in {s:?}"
            );
        }
    }
    ensure!(counts == vec![15, 15, 15, 15, 15, 1], "counts {counts:?}");
    Ok(format!("counts {counts:?}, byte-identical reruns"))
}

// 9 ------------------------------------------------------------------------

fn table_arithmetic() -> Outcome {
    let tasks: Vec<String> = (0..16).map(|i| format!("task{i:02}")).collect();
    let ids: Vec<String> = (1..=12).map(|i| format!("ft{i:02}")).collect();
    let plan = sample_subsets(&ids, &[1, 2, 4, 12], 15, 11).map_err(|e| e.to_string())?;

    let mut records = Vec::new();
    let mut add = |id: &str, mean: f64| {
        // Spread around the mean so tasks differ but average to it.
        for (i, t) in tasks.iter().enumerate() {
            let offset = if i % 2 == 0 { 2.5 } else { -2.5 };
            records.push(EvalRecord {
                model_id: id.to_string(),
                task: t.clone(),
                accuracy: mean + offset,
            });
        }
    };
    add("base", 50.3);
    let ft_means: Vec<f64> = (0..12)
        .map(|i| if i == 6 { 59.0 } else { 47.0 + i as f64 * 0.75 })
        .collect();
    for (id, m) in ids.iter().zip(&ft_means) {
        add(id, *m);
    }
    let pair_offsets: Vec<f64> = (0..15)
        .map(|i| if i < 12 { 0.25 * (i + 1) as f64 } else { -1.5 })
        .collect();
    let mut expected_means: BTreeMap<(String, usize), Vec<f64>> = BTreeMap::new();
    for method in ["ta", "ties"] {
        for (&size, subsets) in &plan.subsets {
            for (i, s) in subsets.iter().enumerate() {
                let mean = match (method, size) {
                    (_, 1) => ft_means[ids.iter().position(|x| *x == s[0]).unwrap()],
                    ("ties", _) => 50.3,
                    (_, 2) => 50.3 + pair_offsets[i],
                    (_, 4) => 50.3 + 0.89,
                    _ => 58.42,
                };
                if size > 1 {
                    add(&merged_model_id(method, s), mean);
                }
                expected_means
                    .entry((method.to_string(), size))
                    .or_default()
                    .push(mean);
            }
        }
    }
    records.shuffle(&mut rng(9));
    let results = EvalResults::from_records(records.clone()).map_err(|e| e.to_string())?;
    let methods = vec!["ta".to_string(), "ties".to_string()];

    let mut cells = BTreeMap::new();
    for reference in [Reference::Base, Reference::BestFinetuned] {
        let rep = interference_report(&results, "base", &plan, &methods, reference)
            .map_err(|e| e.to_string())?;
        let ref_mean = match reference {
            Reference::Base => 50.3,
            Reference::BestFinetuned => 59.0,
        };
        ensure!(rep.rows.len() == 8, "{} rows", rep.rows.len());
        for row in &rep.rows {
            let means = &expected_means[&(row.method.clone(), row.size)];
            let k = means.len() as f64;
            let wins = means.iter().filter(|m| **m > ref_mean).count() as f64;
            let success = 100.0 * wins / k;
            let delta = means.iter().map(|m| m - ref_mean).sum::<f64>() / k;
            ensure!(
                row.combinations == means.len(),
                "{} n={}: k",
                row.method,
                row.size
            );
            ensure!(
                (row.reference_mean - ref_mean).abs() < 1e-9,
                "reference {}",
                row.reference_mean
            );
            ensure!(
                (row.success_rate - success).abs() < 1e-9,
                "{} n={}: success {} vs {success}",
                row.method,
                row.size,
                row.success_rate
            );
            ensure!(
                (row.mean_delta - delta).abs() < 1e-9,
                "{} n={}: delta {} vs {delta}",
                row.method,
                row.size,
                row.mean_delta
            );
            let want_cell = format!("{:.0} / {:+.2}", success, delta);
            ensure!(
                format_cell(row) == want_cell,
                "cell {} vs {want_cell}",
                format_cell(row)
            );
            cells.insert(
                (reference.as_str(), row.method.clone(), row.size),
                format_cell(row),
            );
        }
    }
    let pick = |r: &str, m: &str, n: usize| cells[&(r, m.to_string(), n)].clone();
    ensure!(
        pick("base", "ta", 2) == "80 / +1.00",
        "pairs: {}",
        pick("base", "ta", 2)
    );
    ensure!(
        pick("base", "ta", 4) == "100 / +0.89",
        "quads: {}",
        pick("base", "ta", 4)
    );
    ensure!(
        pick("base", "ties", 4) == "0 / +0.00",
        "ties at base: {}",
        pick("base", "ties", 4)
    );
    ensure!(
        pick("best-finetuned", "ta", 12) == "0 / -0.58",
        "best-ft: {}",
        pick("best-finetuned", "ta", 12)
    );

    // Record order does not matter.
    records.reverse();
    let again = EvalResults::from_records(records).map_err(|e| e.to_string())?;
    let a = interference_report(&results, "base", &plan, &methods, Reference::Base).unwrap();
    let b = interference_report(&again, "base", &plan, &methods, Reference::Base).unwrap();
    ensure!(a == b, "report depends on record order");
    Ok(format!(
        "{} cells match; e.g. {} | {} | {}",
        cells.len(),
        pick("base", "ta", 2),
        pick("base", "ta", 4),
        pick("best-finetuned", "ta", 12)
    ))
}

// 10 -----------------------------------------------------------------------

fn streaming_bound() -> Outcome {
    const SIDE: usize = 4096;
    const BIG: usize = SIDE * SIDE * 4;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let layout = vec![
        TensorLayout {
            name: "embed.weight".into(),
            shape: vec![SIDE, SIDE],
            dtype: Dtype::F32,
        },
        TensorLayout {
            name: "embed.bias".into(),
            shape: vec![SIDE],
            dtype: Dtype::F32,
        },
        TensorLayout {
            name: "head.weight".into(),
            shape: vec![64, SIDE],
            dtype: Dtype::F32,
        },
    ];
    let write_model = |path: &Path, seed: u32| {
        let mut w = CheckpointWriter::create(path, layout.clone(), &BTreeMap::new()).unwrap();
        for t in w.layout().to_vec() {
            let n: usize = t.shape.iter().product();
            let values: Vec<f32> = (0..n as u32)
                .map(|i| {
                    let h = i
                        .wrapping_mul(2_654_435_761)
                        .wrapping_add(seed.wrapping_mul(40_503))
                        >> 8;
                    (h % 2001) as f32 / 1000.0 - 1.0
                })
                .collect();
            w.write_tensor(&t.name, &values).unwrap();
        }
        w.finish().unwrap();
    };
    let base = dir.path().join("base.safetensors");
    write_model(&base, 0);
    let variants: Vec<_> = (1..=12)
        .map(|i| {
            let p = dir.path().join(format!("ft{i:02}.safetensors"));
            write_model(&p, i);
            p
        })
        .collect();

    let bound = 14 * BIG;
    let mut report = Vec::new();
    for method in [MergeMethod::TaskArithmetic, MergeMethod::Ties] {
        let out = dir.path().join(format!("{method}.safetensors"));
        let job = MergeJob::new(&base, variants.clone(), MergeRecipe::new(method), &out);
        let before = CURRENT.load(Ordering::Relaxed);
        PEAK.store(before, Ordering::Relaxed);
        run_merge(&job, |_| {}).map_err(|e| e.to_string())?;
        let peak = PEAK.load(Ordering::Relaxed) - before;
        ensure!(
            peak <= bound,
            "{method}: peak {:.1} MiB exceeds {:.1} MiB",
            peak as f64 / 1048576.0,
            bound as f64 / 1048576.0
        );
        report.push(format!("{method} {:.1} MiB", peak as f64 / 1048576.0));
        std::fs::remove_file(&out).ok();
    }
    Ok(format!(
        "12 variants, 64 MiB tensor; peak {} (bound {:.0} MiB)",
        report.join(", "),
        bound as f64 / 1048576.0
    ))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        ("TA identity", Some(Duration::from_secs(1)), ta_identity),
        (
            "TIES oracle equivalence",
            Some(Duration::from_secs(5)),
            ties_oracle_equivalence,
        ),
        (
            "Model Stock formula",
            Some(Duration::from_secs(1)),
            model_stock_formula,
        ),
        (
            "Spectral properties",
            Some(Duration::from_secs(30)),
            spectral_properties,
        ),
        (
            "TSV single-task identity",
            Some(Duration::from_secs(1)),
            tsv_single_task,
        ),
        ("Hand-traced vectors", None, hand_traced),
        ("Norm law", Some(Duration::from_secs(1)), norm_law),
        ("Protocol fidelity", None, protocol_fidelity),
        ("Table arithmetic", None, table_arithmetic),
        (
            "Streaming bound",
            Some(Duration::from_secs(60)),
            streaming_bound,
        ),
    ];
    let mut failed = 0;
    for (i, (name, budget, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let elapsed = start.elapsed();
        let outcome = match (outcome, budget) {
            (Ok(_), Some(b)) if elapsed > *b => Err(format!(
                "took {:.2} s, budget {} s",
                elapsed.as_secs_f64(),
                b.as_secs()
            )),
            (o, _) => o,
        };
        let (status, detail) = match &outcome {
            Ok(d) => ("PASS", d.as_str()),
            Err(d) => ("FAIL", d.as_str()),
        };
        if outcome.is_err() {
            failed += 1;
        }
        println!(
            "{status} [{:>2}] {name} ({:.2} s): {detail}",
            i + 1,
            elapsed.as_secs_f64()
        );
    }
    println!(
        "{} of {} criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
