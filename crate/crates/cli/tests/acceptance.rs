//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs sequentially (the planted-scene criteria hold several 64^4 tensors in
//! memory). Pass substrings as arguments to run a subset, e.g.
//! `cargo test -p attnseg-cli --test acceptance -- noise`.

use std::io::Cursor;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use attnseg_core::merge::{iterative_merge, kl_distance, MergeConfig};
use attnseg_core::metrics::{match_regions, ConfusionCounts};
use attnseg_core::pipeline::{run_segmentation, PipelineConfig};
use attnseg_core::synth::{generate_tensor_set, standard_census, Layout, PlantedScene};
use attnseg_core::tensor_io::{load_tensor_set, read_tensor, write_tensor, HEADER_LEN};
use attnseg_core::{aggregate, compute_weights, AttentionTensor, Error};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

macro_rules! check {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn within(limit: Duration, start: Instant) -> Result<f64, String> {
    let secs = start.elapsed().as_secs_f64();
    if secs > limit.as_secs_f64() {
        Err(format!(
            "took {secs:.2}s, limit {:.0}s",
            limit.as_secs_f64()
        ))
    } else {
        Ok(secs)
    }
}

fn metric_identities() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    for _ in 0..10_000 {
        let c = ConfusionCounts {
            tp: rng.random_range(0..1_000_000),
            fp: rng.random_range(0..1_000_000),
            fn_: rng.random_range(0..1_000_000),
            tn: rng.random_range(0..1_000_000),
        };
        let (d, i) = (c.dsc() / 100.0, c.iou() / 100.0);
        check!(i <= d, "IoU {i} > DSC {d} for {c:?}");
        worst = worst.max((i - d / (2.0 - d)).abs());
    }
    check!(worst <= 1e-9, "identity residual {worst:e}");
    let secs = within(Duration::from_secs(1), start)?;
    Ok(format!(
        "10000 counts, max residual {worst:.1e}, {secs:.3}s"
    ))
}

fn metric_unit_values() -> Outcome {
    let c = ConfusionCounts {
        tp: 8,
        fp: 2,
        fn_: 2,
        tn: 0,
    };
    check!(c.dsc() == 80.0, "DSC {}", c.dsc());
    check!((c.iou() - 200.0 / 3.0).abs() <= 1e-6, "IoU {}", c.iou());
    check!(format!("{:.3}", c.iou()) == "66.667", "IoU {}", c.iou());
    check!(c.precision() == 80.0, "precision {}", c.precision());
    check!(c.recall() == 80.0, "recall {}", c.recall());
    Ok(format!(
        "DSC {:.1} IoU {:.6} precision {:.1} recall {:.1}",
        c.dsc(),
        c.iou(),
        c.precision(),
        c.recall()
    ))
}

fn random_distribution(rng: &mut ChaCha8Rng, n: usize, sparsity: f64) -> Vec<f32> {
    let raw: Vec<f64> = (0..n)
        .map(|_| {
            if rng.random_bool(sparsity) {
                0.0
            } else {
                rng.random::<f64>().powi(3)
            }
        })
        .collect();
    let total: f64 = raw.iter().sum::<f64>().max(f64::MIN_POSITIVE);
    raw.iter().map(|v| (v / total) as f32).collect()
}

fn kl_premetric() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let n = 64 * 64;
    let dists: Vec<Vec<f32>> = (0..1000)
        .map(|k| random_distribution(&mut rng, n, [0.0, 0.5, 0.95][k % 3]))
        .collect();
    let eps = 1e-12;
    let mut largest = 0.0f64;
    for k in 0..dists.len() {
        let (p, q) = (&dists[k], &dists[(k + 1) % dists.len()]);
        let d = kl_distance(p, q, eps).map_err(|e| e.to_string())?;
        let r = kl_distance(q, p, eps).map_err(|e| e.to_string())?;
        check!(d.to_bits() == r.to_bits(), "asymmetric at {k}: {d} vs {r}");
        check!(d >= 0.0 && d.is_finite(), "D = {d} at {k}");
        let s = kl_distance(p, p, eps).map_err(|e| e.to_string())?;
        check!(s == 0.0, "D(P,P) = {s} at {k}");
        largest = largest.max(d);
    }
    // Disjoint supports: left and right halves, and single points.
    let mut disjoint = 0.0f64;
    for k in 1..n {
        if k % 97 != 0 && k != n / 2 {
            continue;
        }
        let mut p = vec![0.0f32; n];
        let mut q = vec![0.0f32; n];
        p[..k].fill(1.0 / k as f32);
        q[k..].fill(1.0 / (n - k) as f32);
        let d = kl_distance(&p, &q, eps).map_err(|e| e.to_string())?;
        check!(d.is_finite() && d > 0.0, "disjoint split {k}: D = {d}");
        disjoint = disjoint.max(d);
    }
    let secs = within(Duration::from_secs(5), start)?;
    Ok(format!(
        "1000 distributions, max D {largest:.3}, max disjoint D {disjoint:.2}, {secs:.2}s"
    ))
}

fn random_tensor(rng: &mut ChaCha8Rng, layer_id: usize, w: usize) -> AttentionTensor {
    let n = w * w;
    let data = (0..n)
        .flat_map(|_| random_distribution(rng, n, 0.2))
        .collect();
    AttentionTensor::new(layer_id, w, data).unwrap()
}

/// Bilinear sample of a `w x w` map at output pixel `(py, px)` of a `t x t`
/// resize, from the four surrounding source pixels.
fn bilinear_at(map: &[f32], w: usize, t: usize, py: usize, px: usize) -> f64 {
    let coord = |p: usize| {
        ((p as f64 + 0.5) * w as f64 / t as f64 - 0.5)
            .max(0.0)
            .min((w - 1) as f64)
    };
    let (y, x) = (coord(py), coord(px));
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(w - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let at = |r: usize, c: usize| map[r * w + c] as f64;
    (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x1))
        + fy * ((1.0 - fx) * at(y1, x0) + fx * at(y1, x1))
}

fn aggregation_oracle() -> Outcome {
    let start = Instant::now();
    let t = 16;
    let n = t * t;
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut worst = 0.0f64;
    let mut worst_sum = 0.0f64;
    let sets = 8;
    for _ in 0..sets {
        let count = rng.random_range(1..=6);
        let resolutions: Vec<usize> = (0..count)
            .map(|_| [4, 8, 16][rng.random_range(0..3)])
            .collect();
        let tensors: Vec<AttentionTensor> = resolutions
            .iter()
            .enumerate()
            .map(|(k, &w)| random_tensor(&mut rng, k, w))
            .collect();
        let weights = compute_weights(&resolutions).map_err(|e| e.to_string())?;
        let af = aggregate(&tensors, &weights, t).map_err(|e| e.to_string())?;
        for i in 0..t {
            for j in 0..t {
                let mut slice = vec![0.0f64; n];
                for (tensor, &r) in tensors.iter().zip(weights.as_slice()) {
                    let w = tensor.resolution();
                    let d = t / w;
                    let src = tensor.slice(i / d, j / d);
                    for y in 0..t {
                        for x in 0..t {
                            slice[y * t + x] += r * bilinear_at(src, w, t, y, x);
                        }
                    }
                }
                let sum: f64 = slice.iter().sum();
                let got = af.slice(i, j);
                for (g, e) in got.iter().zip(&slice) {
                    worst = worst.max((*g as f64 - e / sum).abs());
                }
                let s: f64 = got.iter().map(|&v| v as f64).sum();
                worst_sum = worst_sum.max((s - 1.0).abs());
            }
        }
    }
    check!(worst <= 1e-6, "max elementwise error {worst:e}");
    check!(worst_sum <= 1e-5, "max slice-sum error {worst_sum:e}");
    let secs = within(Duration::from_secs(10), start)?;
    Ok(format!(
        "{sets} random sets over {{4, 8, 16}}, max error {worst:.1e}, max |sum-1| {worst_sum:.1e}, {secs:.2}s"
    ))
}

const REGION_COUNTS: [usize; 4] = [1, 2, 3, 5];
const SEEDS: std::ops::RangeInclusive<u64> = 1..=20;

/// Region count for a seed; cycles through `REGION_COUNTS`.
fn scene_regions(seed: u64) -> usize {
    REGION_COUNTS[(seed as usize - 1) % REGION_COUNTS.len()]
}

struct SceneResult {
    regions: usize,
    seed: u64,
    num_proposals: usize,
    ious: Vec<f64>,
}

fn planted_suite(noise: f64) -> Result<Vec<SceneResult>, String> {
    let config = PipelineConfig {
        out_width: 64,
        out_height: 64,
        ..PipelineConfig::default()
    };
    let mut out = Vec::new();
    for seed in SEEDS {
        let k = scene_regions(seed);
        let scene =
            PlantedScene::random(Layout::Stripes, 64, k, noise, seed).map_err(|e| e.to_string())?;
        let set = generate_tensor_set(&scene, &standard_census(64)).map_err(|e| e.to_string())?;
        let seg = run_segmentation(&set.tensors, &config).map_err(|e| e.to_string())?;
        let truth = scene.truth_mask(64, 64).map_err(|e| e.to_string())?;
        let matches = match_regions(&seg.mask, &truth).map_err(|e| e.to_string())?;
        out.push(SceneResult {
            regions: k,
            seed,
            num_proposals: seg.summary.num_proposals,
            ious: matches.iter().map(|m| m.counts.iou()).collect(),
        });
    }
    Ok(out)
}

fn planted_recovery() -> Outcome {
    let start = Instant::now();
    let results = planted_suite(0.0)?;
    for r in &results {
        check!(
            r.num_proposals == r.regions,
            "K={} seed={}: N_p = {}",
            r.regions,
            r.seed,
            r.num_proposals
        );
        check!(
            r.ious.iter().all(|&v| v == 100.0),
            "K={} seed={}: IoUs {:?}",
            r.regions,
            r.seed,
            r.ious
        );
    }
    let secs = within(Duration::from_secs(120), start)?;
    Ok(format!(
        "{} scenes (seeds 1..20, K cycling {REGION_COUNTS:?}): N_p = K, every region IoU 100.0, {secs:.1}s",
        results.len()
    ))
}

/// Fixed from the baseline run recorded in docs/noise-baseline.md.
const NOISE_IOU_THRESHOLD: f64 = 90.0;

fn noise_robustness() -> Outcome {
    let start = Instant::now();
    let results = planted_suite(0.2)?;
    let ious: Vec<f64> = results
        .iter()
        .flat_map(|r| r.ious.iter().copied())
        .collect();
    let mean = ious.iter().sum::<f64>() / ious.len() as f64;
    let min = ious.iter().copied().fold(f64::INFINITY, f64::min);
    let exact_np = results
        .iter()
        .filter(|r| r.num_proposals == r.regions)
        .count();
    check!(
        mean >= NOISE_IOU_THRESHOLD,
        "mean per-region IoU {mean:.3} < {NOISE_IOU_THRESHOLD}"
    );
    let secs = within(Duration::from_secs(120), start)?;
    Ok(format!(
        "alpha 0.2: mean per-region IoU {mean:.3} (min {min:.2}) over {} regions, N_p = K in {exact_np}/{} scenes, {secs:.1}s",
        ious.len(),
        results.len()
    ))
}

fn merge_monotonicity() -> Outcome {
    let scene = PlantedScene::random(Layout::Stripes, 64, 3, 0.2, 7).map_err(|e| e.to_string())?;
    let set = generate_tensor_set(&scene, &standard_census(64)).map_err(|e| e.to_string())?;
    let res: Vec<usize> = set.tensors.iter().map(|t| t.resolution()).collect();
    let af =
        aggregate(&set.tensors, &compute_weights(&res).unwrap(), 64).map_err(|e| e.to_string())?;
    drop(set);

    let base = MergeConfig::default();
    let m = base.grid_size;
    let anchors = attnseg_core::anchor_grid(m, 64).unwrap();
    let mut bits: Vec<Vec<u32>> = anchors
        .iter()
        .map(|&(i, j)| af.slice(i, j).iter().map(|v| v.to_bits()).collect())
        .collect();
    bits.sort();
    bits.dedup();
    check!(
        bits.len() == m * m,
        "only {} distinct anchor maps",
        bits.len()
    );

    let taus = [0.0, 0.25, 0.5, 1.0, 2.0, 4.0, f64::INFINITY];
    let mut counts = Vec::new();
    for &tau in &taus {
        let config = MergeConfig {
            threshold: tau,
            ..base
        };
        counts.push(
            iterative_merge(&af, &config)
                .map_err(|e| e.to_string())?
                .len(),
        );
    }
    check!(
        counts.windows(2).all(|w| w[1] <= w[0]),
        "N_p not monotone: {counts:?}"
    );
    check!(counts[0] == m * m, "N_p(0) = {} != {}", counts[0], m * m);
    check!(
        *counts.last().unwrap() == 1,
        "N_p(inf) = {}",
        counts.last().unwrap()
    );
    Ok(format!("tau {taus:?} -> N_p {counts:?}"))
}

fn attnseg() -> Command {
    Command::new(env!("CARGO_BIN_EXE_attnseg"))
}

fn run_ok(cmd: &mut Command) -> Result<(), String> {
    let out = cmd.output().map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!(
            "{:?} failed: {}",
            cmd,
            String::from_utf8_lossy(&out.stderr)
        ))
    }
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let fixture = dir.path().join("fixture");
    run_ok(
        attnseg()
            .args([
                "synth-gen",
                "--regions",
                "3",
                "--noise",
                "0.2",
                "--seed",
                "11",
                "--out",
            ])
            .arg(&fixture),
    )?;
    let manifest = fixture.join("manifest.json");
    let mut outputs: Vec<Vec<(String, Vec<u8>)>> = Vec::new();
    for threads in [1, 4, 8] {
        let out = dir.path().join(format!("t{threads}"));
        run_ok(
            attnseg()
                .env("ATTNSEG_THREADS", threads.to_string())
                .args([
                    "segment",
                    "--out-size",
                    "128x96",
                    "--point",
                    "40,30",
                    "--manifest",
                ])
                .arg(&manifest)
                .arg("--out")
                .arg(&out),
        )?;
        let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(&out)
            .map_err(|e| e.to_string())?
            .map(|e| {
                let p = e.unwrap().path();
                (
                    p.file_name().unwrap().to_string_lossy().into_owned(),
                    std::fs::read(&p).unwrap(),
                )
            })
            .filter(|(name, _)| !name.ends_with(".timings.json"))
            .collect();
        files.sort();
        outputs.push(files);
    }
    let names: Vec<&str> = outputs[0].iter().map(|(n, _)| n.as_str()).collect();
    check!(names.len() == 3, "unexpected outputs {names:?}");
    for (k, other) in outputs.iter().enumerate().skip(1) {
        check!(
            other == &outputs[0],
            "outputs with {} threads differ from 1 thread",
            [1, 4, 8][k]
        );
    }
    Ok(format!(
        "threads 1/4/8 byte-identical: {}",
        names.join(", ")
    ))
}

fn expect_error(bytes: &[u8], name: &str, pred: impl Fn(&Error) -> bool) -> Result<(), String> {
    match read_tensor(Cursor::new(bytes)) {
        Err(e) if pred(&e) => Ok(()),
        Err(e) => Err(format!("{name}: got {e:?}")),
        Ok(_) => Err(format!("{name}: accepted")),
    }
}

fn header(magic: &[u8; 4], version: u32, dims: &[u32]) -> Vec<u8> {
    let mut b = magic.to_vec();
    b.extend_from_slice(&version.to_le_bytes());
    b.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for d in dims {
        b.extend_from_slice(&d.to_le_bytes());
    }
    b
}

fn write_manifest(dir: &Path, json: &str) -> std::path::PathBuf {
    let p = dir.join("manifest.json");
    std::fs::write(&p, json).unwrap();
    p
}

fn format_round_trip() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(31337);
    let mut bytes_total = 0usize;
    for k in 0..1000 {
        let w = rng.random_range(1..=8usize);
        let n = w.pow(4);
        // Arbitrary nonnegative finite bit patterns, including zeros and
        // subnormals, not only well-behaved probabilities.
        let data: Vec<f32> = (0..n)
            .map(|_| match rng.random_range(0..4) {
                0 => 0.0,
                1 => f32::from_bits(rng.random_range(1..0x0080_0000)),
                _ => f32::from_bits(rng.random_range(0..0x7f80_0000)),
            })
            .collect();
        let t = AttentionTensor::new(k, w, data).map_err(|e| e.to_string())?;
        let mut buf = Vec::new();
        write_tensor(&t, &mut buf).map_err(|e| e.to_string())?;
        check!(
            buf.len() == HEADER_LEN + 4 * n,
            "tensor {k}: {} bytes",
            buf.len()
        );
        bytes_total += buf.len();
        let back = read_tensor(Cursor::new(&buf)).map_err(|e| e.to_string())?;
        check!(
            back.resolution() == w,
            "tensor {k}: resolution {}",
            back.resolution()
        );
        let same = back
            .data()
            .iter()
            .zip(t.data())
            .all(|(a, b)| a.to_bits() == b.to_bits());
        check!(same, "tensor {k}: payload differs after round trip");
    }

    let mut good = Vec::new();
    write_tensor(
        &AttentionTensor::new(0, 2, vec![0.25; 16]).unwrap(),
        &mut good,
    )
    .unwrap();
    let mut cases = 0;
    expect_error(
        &[b"XXXX".as_slice(), &good[4..]].concat(),
        "BadMagic",
        |e| matches!(e, Error::BadMagic { offset: 0, .. }),
    )?;
    expect_error(
        &[&good[..4], &2u32.to_le_bytes(), &good[8..]].concat(),
        "UnsupportedVersion",
        |e| {
            matches!(
                e,
                Error::UnsupportedVersion {
                    version: 2,
                    offset: 4
                }
            )
        },
    )?;
    let mut nonsquare = header(b"ADZT", 1, &[8, 8, 8, 4]);
    nonsquare.extend(std::iter::repeat_n(0u8, 8 * 8 * 8 * 4 * 4));
    expect_error(&nonsquare, "ShapeMismatch (8x8x8x4)", |e| {
        matches!(e, Error::ShapeMismatch { .. })
    })?;
    expect_error(
        &header(b"ADZT", 1, &[4, 4, 4]),
        "ShapeMismatch (ndim 3)",
        |e| matches!(e, Error::ShapeMismatch { offset: 8, .. }),
    )?;
    for (bad, label) in [(f32::NAN, "NaN"), (f32::INFINITY, "inf")] {
        let mut b = good.clone();
        b[HEADER_LEN + 4 * 5..HEADER_LEN + 4 * 6].copy_from_slice(&bad.to_le_bytes());
        expect_error(
            &b,
            &format!("NonFiniteValue ({label})"),
            |e| matches!(e, Error::NonFiniteValue { index: [0, 1, 0, 1], offset, .. } if *offset == (HEADER_LEN + 20) as u64),
        )?;
    }
    let mut neg = good.clone();
    neg[HEADER_LEN..HEADER_LEN + 4].copy_from_slice(&(-0.5f32).to_le_bytes());
    expect_error(&neg, "NegativeValue", |e| {
        matches!(e, Error::NegativeValue { .. })
    })?;
    expect_error(&good[..good.len() - 1], "Truncated", |e| {
        matches!(e, Error::Truncated { .. })
    })?;
    cases += 8;

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = dir.path();
    std::fs::write(d.join("a.adzt"), &good).unwrap();
    let mut drifted = good.clone();
    for v in 0..4 {
        let o = HEADER_LEN + 4 * v;
        drifted[o..o + 4].copy_from_slice(&0.3f32.to_le_bytes());
    }
    std::fs::write(d.join("bad.adzt"), &drifted).unwrap();
    let entry = |id: usize, file: &str| {
        format!(r#"{{"layer_id": {id}, "resolution": 2, "file": "{file}"}}"#)
    };
    let manifest = |entries: &[String]| {
        format!(
            r#"{{"image_id": "x", "latent_resolution": 2, "timestep": 300, "extractor_info": "", "entries": [{}]}}"#,
            entries.join(",")
        )
    };
    let loads = |json: &str| load_tensor_set(&write_manifest(d, json));
    let manifest_err = |r: Result<_, Error>, what: &str| match r {
        Err(Error::Manifest { .. }) => Ok(()),
        Err(e) => Err(format!("{what}: got {e:?}")),
        Ok(_) => Err(format!("{what}: accepted")),
    };
    check!(
        loads(&manifest(&[entry(0, "a.adzt")])).is_ok(),
        "valid manifest rejected"
    );
    manifest_err(loads(&manifest(&[])), "empty entries")?;
    manifest_err(
        loads(&manifest(&[entry(0, "a.adzt"), entry(0, "a.adzt")])),
        "duplicate layer_id",
    )?;
    manifest_err(
        loads(r#"{"image_id": "x", "entries": []"#),
        "malformed JSON",
    )?;
    match loads(&manifest(&[entry(0, "missing.adzt")])) {
        Err(e @ Error::File { .. }) if matches!(e.root(), Error::Io(_)) => {}
        other => return Err(format!("missing file: got {other:?}")),
    }
    match loads(&manifest(&[entry(0, "bad.adzt")])) {
        Err(e) if matches!(e.root(), Error::Unnormalized { .. }) => {}
        other => return Err(format!("unnormalized slice: got {other:?}")),
    }
    cases += 5;
    Ok(format!(
        "1000 tensors ({:.1} MB) bit-identical; {cases} error cases raise their named errors",
        bytes_total as f64 / 1e6
    ))
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("metric identities", metric_identities),
        ("metric unit values", metric_unit_values),
        ("kl premetric suite", kl_premetric),
        ("aggregation oracle", aggregation_oracle),
        ("planted recovery", planted_recovery),
        ("noise robustness", noise_robustness),
        ("merge monotonicity", merge_monotonicity),
        ("determinism", determinism),
        ("format round-trip", format_round_trip),
    ];
    let filters: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let mut failed = 0;
    let mut ran = 0;
    for (name, criterion) in criteria {
        if !filters.is_empty() && !filters.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        ran += 1;
        let outcome = catch_unwind(AssertUnwindSafe(criterion)).unwrap_or_else(|panic| {
            let msg = panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name}: {detail}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
