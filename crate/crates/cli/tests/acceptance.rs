//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.
//!
//! `cargo test --test acceptance` runs everything; pass criterion numbers
//! after `--` to run a subset, e.g. `cargo test --test acceptance -- 1 3 10`.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::Rng;

use gradsuggest::autodiff::{grad_check, Tensor};
use gradsuggest::data::{
    generate_phantom_dataset, read_dataset, write_dataset, Cohort, PhantomSpec, Site, Split, Strategy,
};
use gradsuggest::harness::{emit_report, Experiment, ExperimentConfig, RoundReport, Scenario};
use gradsuggest::models::checkpoint::{decode, encode, Model};
use gradsuggest::models::{dice_loss, kl_standard_normal, LatentCode, SegArch, SegModel, TrainOptions, VaeArch, VaeModel};
use gradsuggest::sampling::{build_latent_index, query_constrained_nn, suggest_gradient_guided, suggest_oracle, units, Method, Unit};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn out_dir(name: &str) -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance").join(name);
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn jobs() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

fn gradients() -> Outcome {
    let started = Instant::now();
    let mut worst: BTreeMap<&str, (f64, f64)> = BTreeMap::new();
    let mut note = |name, err: f64, tol: f64| {
        let w = worst.entry(name).or_insert((0.0, tol));
        w.0 = w.0.max(err);
    };
    for seed in 0..50 {
        for c in common::primitive_cases(seed) {
            note(c.name, grad_check(&c.f, &c.x, c.h).unwrap(), c.tolerance());
        }
    }
    let (composed, set_aside) = common::composed_instances(50);
    for c in &composed {
        note(c.name, grad_check(&c.f, &c.x, c.h).unwrap(), c.tolerance());
    }
    let elapsed = started.elapsed();
    let bad: Vec<String> = worst
        .iter()
        .filter(|(_, (e, tol))| e >= tol)
        .map(|(n, (e, _))| format!("{n} {e:.1e}"))
        .collect();
    let smooth = worst.values().filter(|(_, t)| *t < common::KINK_TOL).map(|(e, _)| *e).fold(0.0, f64::max);
    let kinked = worst.values().filter(|(_, t)| *t >= common::KINK_TOL).map(|(e, _)| *e).fold(0.0, f64::max);
    outcome(
        bad.is_empty() && elapsed < Duration::from_secs(60),
        format!(
            "{} checks, worst smooth {smooth:.1e} (< 1e-7), worst piecewise {kinked:.1e} (< 1e-5), \
             {set_aside} composed draws set aside with a kink inside the stencil{}",
            worst.len(),
            if bad.is_empty() { String::new() } else { format!(", over tolerance: {}", bad.join(", ")) }
        ),
    )
}

fn loss_identities() -> Outcome {
    let mut r = common::rng(2);
    let mut min_kl = f64::INFINITY;
    for _ in 0..1000 {
        let d = r.random_range(1..=8);
        let code = LatentCode {
            mu: (0..d).map(|_| r.random_range(-5.0..5.0)).collect(),
            logvar: (0..d).map(|_| r.random_range(-6.0..4.0)).collect(),
        };
        min_kl = min_kl.min(kl_standard_normal(&code).unwrap());
    }
    let mut self_err: f64 = 0.0;
    for _ in 0..100 {
        let n = r.random_range(1..=64);
        let y = common::random_mask(&mut r, &[n], 0.3);
        self_err = self_err.max((dice_loss(&y, &y).unwrap() + 1.0).abs());
    }
    let (mut lo, mut hi) = (0.0f64, -1.0f64);
    for _ in 0..1000 {
        let n = r.random_range(1..=64);
        let fill = r.random_range(0.0..1.0);
        let y = common::random_mask(&mut r, &[n], fill);
        let p = Tensor::vector((0..n).map(|_| r.random_range(0.0..=1.0)).collect());
        let l = dice_loss(&p, &y).unwrap();
        lo = lo.min(l);
        hi = hi.max(l);
    }
    outcome(
        min_kl >= 0.0 && self_err <= 1e-9 && lo >= -1.0 && hi <= 0.0,
        format!("min KL {min_kl:.3e}, max |dice(y,y)+1| {self_err:.1e}, dice range [{lo:.4}, {hi:.4}]"),
    )
}

fn constrained_nn() -> Outcome {
    let (mut fallbacks, mut mismatches) = (0, Vec::new());
    for seed in 0..1000 {
        let (index, q, theta, excluded) = common::random_nn_config(10_000 + seed);
        let got = query_constrained_nn(&index, &q, theta, &excluded).unwrap();
        let want = common::brute_constrained_nn(index.entries(), &q.z_source, &q.z_target, theta, &excluded).unwrap();
        fallbacks += usize::from(got.1);
        if got != want {
            mismatches.push(seed);
        }
    }
    outcome(
        mismatches.is_empty(),
        format!("1000 configurations, {fallbacks} fallbacks, mismatches at {mismatches:?}"),
    )
}

fn trained_seg(ds: &gradsuggest::data::Dataset, seed: u64, epochs: usize) -> SegModel {
    let mut seg = SegModel::new(SegArch::desk(ds.height, ds.width), seed).unwrap();
    if epochs > 0 {
        let data: Vec<(Vec<f64>, Vec<f64>)> =
            ds.samples().iter().take(12).map(|s| (s.image_f64(), s.mask_f64().unwrap())).collect();
        let pairs: Vec<(&[f64], &[f64])> = data.iter().map(|(a, b)| (a.as_slice(), b.as_slice())).collect();
        seg.train(&pairs, &TrainOptions { epochs, ..TrainOptions::segmenter(seed) }).unwrap();
    }
    seg
}

fn oracle_baseline() -> Outcome {
    let mut mismatches = Vec::new();
    for i in 0..20u64 {
        let mut r = common::rng(500 + i);
        let ds = common::small_dataset(500 + i, r.random_range(3..=8), r.random_range(1..=4));
        let strategy = if r.random_bool(0.5) { Strategy::Patient } else { Strategy::Image };
        let seg = trained_seg(&ds, i, r.random_range(0..=3));
        let mut pool = units(&ds, &ds.sample_ids(Some(Split::Train), None), strategy).unwrap();
        pool.shuffle(&mut r);
        let m = r.random_range(1..=pool.len());
        let got = suggest_oracle(&seg, &pool, m).unwrap().selected_ids;

        let mut by_id: Vec<&Unit> = pool.iter().collect();
        by_id.sort_by(|a, b| a.id.cmp(&b.id));
        let owned: Vec<Unit> = by_id.into_iter().cloned().collect();
        let scores = common::exhaustive_unit_scores(&seg, &owned);
        let mut order: Vec<usize> = (0..owned.len()).collect();
        order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
        let want: Vec<String> = order[..m].iter().map(|&k| owned[k].id.clone()).collect();
        if got != want {
            mismatches.push(i);
        }
    }
    outcome(mismatches.is_empty(), format!("20 instances, mismatches at {mismatches:?}"))
}

fn degenerate_chain() -> Outcome {
    let mut mismatches = Vec::new();
    for i in 0..20u64 {
        let mut r = common::rng(900 + i);
        let ds = common::small_dataset(900 + i, r.random_range(6..=10), r.random_range(1..=3));
        let strategy = if r.random_bool(0.5) { Strategy::Patient } else { Strategy::Image };
        let mut all = units(&ds, &ds.sample_ids(Some(Split::Train), None), strategy).unwrap();
        all.shuffle(&mut r);
        let n_src = r.random_range(1..=all.len() / 2);
        let pool = all.split_off(n_src);
        let sources = all;
        let m = r.random_range(1..=n_src);
        let vae = VaeModel::new(VaeArch::desk(ds.height, ds.width), r.random()).unwrap();
        let seg = trained_seg(&ds, i, 0);
        let index = build_latent_index(&vae, &pool).unwrap();
        let got = suggest_gradient_guided(&seg, &vae, &sources, &index, m, 0.0, 180.0).unwrap();

        let latents: Vec<(String, Vec<f64>)> =
            pool.iter().map(|u| (u.id.clone(), common::unit_latent(&vae, &u.slices))).collect();
        let mut ordered: Vec<&Unit> = sources.iter().collect();
        ordered.sort_by(|a, b| a.id.cmp(&b.id));
        let mut taken = BTreeSet::new();
        let mut want = Vec::new();
        for s in ordered.into_iter().take(m) {
            let z = common::unit_latent(&vae, &s.slices);
            let id = common::brute_constrained_nn(&latents, &z, &z, 180.0, &taken).unwrap().0;
            taken.insert(id.clone());
            want.push(id);
        }
        if got.selected_ids != want {
            mismatches.push(i);
        }
    }
    outcome(mismatches.is_empty(), format!("20 scenarios, mismatches at {mismatches:?}"))
}

fn determinism() -> Outcome {
    let dir = out_dir("determinism");
    let config = "budget = [2, 4]\nrepeats = 3\nepochs_initial = 3\nepochs_after = 3\nvae_epochs = 3\n\
                  train_patients = 8\ntest_patients = 4\nslices = 4\n";
    std::fs::write(dir.join("c.txt"), config).unwrap();
    let mut details = Vec::new();
    let mut pass = true;
    for scenario in ["scratch", "transfer"] {
        let csv = |jobs: &str, tag: &str| {
            let out = format!("{scenario}_{tag}");
            let o = Command::new(env!("CARGO_BIN_EXE_gradsuggest"))
                .args(["-q", "run", "--config", "c.txt", "--scenario", scenario, "--jobs", jobs, "--out", &out])
                .current_dir(&dir)
                .output()
                .unwrap();
            assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
            std::fs::read(dir.join(out).join("report.csv")).unwrap()
        };
        let (a, b, c) = (csv("1", "first"), csv("1", "second"), csv("4", "parallel"));
        let same = a == b && a == c;
        pass &= same;
        details.push(format!("{scenario}: {} bytes, {}", a.len(), if same { "identical" } else { "DIFFERENT" }));
    }
    outcome(pass, details.join("; "))
}

fn vae_learning() -> Outcome {
    let spec = PhantomSpec::desk(
        1,
        vec![
            Cohort { site: Site::A, train: 30, test: 0 },
            Cohort { site: Site::B, train: 30, test: 0 },
        ],
    );
    let ds = generate_phantom_dataset(&spec).unwrap();
    let images: Vec<Vec<f64>> = ds.samples().iter().map(|s| s.image_f64()).collect();
    let refs: Vec<&[f64]> = images.iter().map(Vec::as_slice).collect();
    let mut vae = VaeModel::new(VaeArch::desk(ds.height, ds.width), 1).unwrap();
    let opts = TrainOptions::vae(1);
    let h = vae.train(&refs, &opts).unwrap();
    let (first, last) = (h[0], h[h.len() - 1]);
    outcome(
        h.len() == 50 && opts.lr == 1e-4 && last <= 0.5 * first,
        format!("{} slices, epoch 1 loss {first:.4}, epoch {} loss {last:.4} ({:.0}% lower)", refs.len(), h.len(), 100.0 * (1.0 - last / first)),
    )
}

fn means(rows: &[RoundReport]) -> BTreeMap<(usize, Method), f64> {
    let mut acc: BTreeMap<(usize, Method), Vec<f64>> = BTreeMap::new();
    for r in rows {
        acc.entry((r.budget, r.method)).or_default().push(r.dice);
    }
    acc.into_iter().map(|(k, v)| (k, v.iter().sum::<f64>() / v.len() as f64)).collect()
}

fn trend() -> Outcome {
    let started = Instant::now();
    let cfg = ExperimentConfig::default();
    let budgets = cfg.budgets.clone();
    let exp = Experiment::prepare(cfg).unwrap();
    let rows = exp.run_all(jobs(), &|_| {}).unwrap();
    let elapsed = started.elapsed();
    emit_report(&rows, &out_dir("trend")).unwrap();
    let m = means(&rows);
    let mut pass = elapsed < Duration::from_secs(30 * 60);
    let mut cells = Vec::new();
    for b in budgets {
        let (g, r, o) = (m[&(b, Method::Gradient)], m[&(b, Method::Random)], m[&(b, Method::Oracle)]);
        let ok = g >= r && g >= o - 0.03;
        pass &= ok;
        cells.push(format!("b{b} g {g:.4} r {r:.4} o {o:.4}{}", if ok { "" } else { " x" }));
    }
    outcome(pass, format!("{}; {:.1} min on {} thread(s)", cells.join(", "), elapsed.as_secs_f64() / 60.0, jobs()))
}

fn transfer() -> Outcome {
    let mut cfg = ExperimentConfig::default();
    cfg.scenario = Scenario::Transfer;
    cfg.budgets = vec![8];
    let exp = Experiment::prepare(cfg).unwrap();
    let baseline = exp.baseline_dice.unwrap();
    let rows = exp.run_all(jobs(), &|_| {}).unwrap();
    // every round checks its annotations; the pool and test split are checked here
    let only_b = exp
        .pool_ids()
        .iter()
        .chain(exp.test_ids())
        .all(|id| exp.dataset.sample(id).unwrap().site == Site::B);
    let m = means(&rows);
    let mut pass = only_b && rows.len() == 30;
    let mut cells = Vec::new();
    for method in Method::ALL {
        let d = m[&(8, method)];
        pass &= d >= baseline + 0.02;
        cells.push(format!("{method} {d:.4} ({:+.4})", d - baseline));
    }
    outcome(pass, format!("site-A model on site B {baseline:.4}; after adaptation {}", cells.join(", ")))
}

/// Every single-byte change must be rejected.
fn all_flips_detected(bytes: &[u8], positions: &[usize], check: &dyn Fn(&[u8]) -> bool) -> usize {
    let mut missed = 0;
    for &i in positions {
        for x in [0x01u8, 0x80, 0xff] {
            let mut bad = bytes.to_vec();
            bad[i] ^= x;
            missed += usize::from(check(&bad));
        }
    }
    missed
}

fn format_integrity() -> Outcome {
    let dir = out_dir("format");
    let spec = PhantomSpec::desk(
        3,
        vec![
            Cohort { site: Site::A, train: 2, test: 1 },
            Cohort { site: Site::B, train: 1, test: 1 },
        ],
    );
    let mut ds = generate_phantom_dataset(&spec).unwrap();
    let (a, b) = (dir.join("a"), dir.join("b"));
    write_dataset(&ds, &a).unwrap();
    let back = read_dataset(&a).unwrap();
    write_dataset(&back, &b).unwrap();
    let files: Vec<String> = std::fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    let bytes_equal = files.iter().all(|f| std::fs::read(a.join(f)).unwrap() == std::fs::read(b.join(f)).unwrap());
    let mut pass = back == ds && bytes_equal;

    // unannotated slices round-trip too
    ds = back;
    let victim = a.join("A000_3.ggs");
    let good = std::fs::read(&victim).unwrap();
    let positions: Vec<usize> = (0..good.len()).collect();
    let missed_slice = all_flips_detected(&good, &positions, &|bad| {
        std::fs::write(&victim, bad).unwrap();
        read_dataset(&a).is_ok()
    });
    std::fs::write(&victim, &good).unwrap();
    pass &= read_dataset(&a).unwrap() == ds;

    let mut missed_ckpt = 0;
    let mut ckpt_bytes = 0;
    let models = [
        Model::Vae(common::tiny_vae(1)),
        Model::Segmenter(common::tiny_seg(2)),
        Model::Vae(VaeModel::new(VaeArch::desk(32, 32), 3).unwrap()),
        Model::Segmenter(SegModel::new(SegArch::desk(32, 32), 4).unwrap()),
    ];
    for (k, model) in models.iter().enumerate() {
        let bytes = encode(model);
        ckpt_bytes += bytes.len();
        pass &= decode(Path::new("m"), &bytes).unwrap() == *model && encode(&decode(Path::new("m"), &bytes).unwrap()) == bytes;
        let positions: Vec<usize> = if k < 2 {
            (0..bytes.len()).collect()
        } else {
            let mut r = common::rng(k as u64);
            (0..500).map(|_| r.random_range(0..bytes.len())).collect()
        };
        missed_ckpt += all_flips_detected(&bytes, &positions, &|bad| decode(Path::new("m"), bad).is_ok());
        missed_ckpt += (0..bytes.len()).step_by(97).filter(|&n| decode(Path::new("m"), &bytes[..n]).is_ok()).count();
    }
    pass &= missed_slice == 0 && missed_ckpt == 0;
    outcome(
        pass,
        format!(
            "{} files round-trip bit-exactly; {} slice-file and {} checkpoint corruptions undetected ({} checkpoint bytes)",
            files.len(),
            missed_slice,
            missed_ckpt,
            ckpt_bytes
        ),
    )
}

fn main() {
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let criteria: [(u32, &str, fn() -> Outcome); 10] = [
        (1, "gradient correctness", gradients),
        (2, "loss identities", loss_identities),
        (3, "constrained-NN oracle equivalence", constrained_nn),
        (4, "oracle-baseline correctness", oracle_baseline),
        (5, "degenerate-chain equivalence", degenerate_chain),
        (6, "determinism", determinism),
        (7, "VAE learning signal", vae_learning),
        (10, "format integrity", format_integrity),
        (9, "transfer scenario contract", transfer),
        (8, "trend reproduction", trend),
    ];
    let mut failed = Vec::new();
    for (n, name, run) in criteria {
        if !wanted.is_empty() && !wanted.contains(&n) {
            continue;
        }
        let started = Instant::now();
        let o = std::panic::catch_unwind(run).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        println!(
            "{} criterion {n:>2} {name}: {} [{:.1}s]",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            started.elapsed().as_secs_f64()
        );
        if !o.pass {
            failed.push(n);
        }
    }
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
