use std::collections::BTreeSet;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::ArgMatches;

use gradsuggest::data::{
    generate_phantom_dataset, read_dataset, write_dataset, Annotator, Dataset, PhantomSpec, Sample, Site, Split,
    Strategy,
};
use gradsuggest::harness::{aggregate, emit_report, read_report_csv, Experiment, ExperimentConfig, CONFIG_KEYS};
use gradsuggest::models::checkpoint::{read_checkpoint, write_checkpoint, Model};
use gradsuggest::models::{SegArch, SegModel, TrainOptions, VaeArch, VaeModel};
use gradsuggest::sampling::{
    build_latent_index, render_suggestions, suggest_gradient_guided, suggest_oracle, suggest_random, units, Method,
    SuggestionResult,
};
use gradsuggest::{Error, Result};

pub fn dispatch(m: &ArgMatches) -> Result<()> {
    let quiet = m.get_flag("quiet");
    let (name, sub) = m.subcommand().expect("a subcommand is required");
    if name != "run" {
        print_options(name, sub);
    }
    match name {
        "gen-data" => gen_data(sub),
        "train-vae" => train_vae(sub, quiet),
        "train-seg" => train_seg(sub, quiet),
        "suggest" => suggest(sub),
        "run" => run(sub, quiet),
        "report" => report(sub),
        _ => unreachable!("clap rejects unknown subcommands"),
    }
}

/// Every option of the subcommand, defaults included, on stderr.
fn print_options(name: &str, m: &ArgMatches) {
    let cmd = crate::args::command();
    let sub = cmd.find_subcommand(name).expect("known subcommand");
    eprintln!("# {name}");
    for arg in sub.get_arguments() {
        let id = arg.get_id().as_str();
        if id == "quiet" || id == "help" {
            continue;
        }
        let value = m
            .get_raw(id)
            .map(|vals| vals.map(|v| v.to_string_lossy()).collect::<Vec<_>>().join(","))
            .unwrap_or_else(|| "(unset)".into());
        eprintln!("{} = {value}", id.replace('-', "_"));
    }
}

fn get<T: Clone + Send + Sync + 'static>(m: &ArgMatches, id: &str) -> T {
    m.get_one::<T>(id).cloned().expect("argument has a default or is required")
}

fn path(m: &ArgMatches, id: &str) -> Option<PathBuf> {
    m.get_one::<String>(id).map(PathBuf::from)
}

fn site(m: &ArgMatches) -> Result<Option<Site>> {
    m.get_one::<String>("site").map(|s| s.parse()).transpose()
}

fn usage(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

/// Ids from a list file. Blank lines and `#` comments are skipped, so
/// suggestion files can be passed directly.
fn read_ids(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        context: format!("reading {}", path.display()),
        source: e,
    })?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_string)
        .collect())
}

/// Sample ids behind a mix of patient and sample ids, in order, without repeats.
fn expand(ds: &Dataset, ids: &[String]) -> Result<Vec<String>> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for id in ids {
        let slices: Vec<&Sample> = if ds.patients.contains_key(id) {
            ds.patient_slices(id)?.iter().collect()
        } else {
            vec![ds.sample(id)?]
        };
        for s in slices {
            if seen.insert(s.sample_id.clone()) {
                out.push(s.sample_id.clone());
            }
        }
    }
    Ok(out)
}

fn load_vae(path: &Path) -> Result<VaeModel> {
    match read_checkpoint(path)? {
        Model::Vae(v) => Ok(v),
        Model::Segmenter(_) => Err(usage(format!("{} holds a segmenter, not a VAE", path.display()))),
    }
}

fn load_seg(path: &Path) -> Result<SegModel> {
    match read_checkpoint(path)? {
        Model::Segmenter(s) => Ok(s),
        Model::Vae(_) => Err(usage(format!("{} holds a VAE, not a segmenter", path.display()))),
    }
}

fn print_history(history: &[f64]) -> Result<()> {
    let mut out = std::io::stdout().lock();
    let io = |e| Error::Io {
        context: "writing to standard output".into(),
        source: e,
    };
    writeln!(out, "epoch,loss").map_err(io)?;
    for (i, l) in history.iter().enumerate() {
        writeln!(out, "{},{l:?}", i + 1).map_err(io)?;
    }
    Ok(())
}

fn gen_data(m: &ArgMatches) -> Result<()> {
    let site = site(m)?.expect("site has a default");
    let mut spec = PhantomSpec::single(
        get(m, "seed"),
        get(m, "patients"),
        get(m, "slices"),
        site,
        get(m, "height"),
        get(m, "width"),
    );
    spec.cohorts[0].test = get(m, "test-patients");
    let ds = generate_phantom_dataset(&spec)?;
    let out = path(m, "out").expect("required");
    write_dataset(&ds, &out)?;
    eprintln!("wrote {} slices of {} patients to {}", ds.len(), ds.patients.len(), out.display());
    Ok(())
}

fn training_images(ds: &Dataset, site: Option<Site>) -> Result<Vec<Vec<f64>>> {
    let ids = ds.sample_ids(Some(Split::Train), site);
    ids.iter().map(|id| ds.sample(id).map(Sample::image_f64)).collect()
}

fn train_vae(m: &ArgMatches, quiet: bool) -> Result<()> {
    let ds = read_dataset(&path(m, "data").expect("required"))?;
    let images = training_images(&ds, site(m)?)?;
    let refs: Vec<&[f64]> = images.iter().map(Vec::as_slice).collect();
    let arch = VaeArch {
        latent_dim: get(m, "latent-dim"),
        ..VaeArch::desk(ds.height, ds.width)
    };
    let seed: u64 = get(m, "seed");
    let mut vae = VaeModel::new(arch, seed)?;
    if !quiet {
        eprintln!("training the VAE on {} slices", refs.len());
    }
    let history = vae.train(
        &refs,
        &TrainOptions {
            epochs: get(m, "epochs"),
            lr: get(m, "lr"),
            seed,
            batch_size: get(m, "batch-size"),
        },
    )?;
    write_checkpoint(&path(m, "out").expect("required"), &Model::Vae(vae))?;
    print_history(&history)
}

fn train_seg(m: &ArgMatches, quiet: bool) -> Result<()> {
    let ds = read_dataset(&path(m, "data").expect("required"))?;
    let ids = match path(m, "ids") {
        Some(p) => expand(&ds, &read_ids(&p)?)?,
        None => ds.sample_ids(Some(Split::Train), None),
    };
    let seed: u64 = get(m, "seed");
    let mut seg = match path(m, "init") {
        Some(p) => load_seg(&p)?,
        None => SegModel::new(SegArch::desk(ds.height, ds.width), seed)?,
    };
    let labeled = Annotator::new(Strategy::Patient).annotate(&ds, &ids)?;
    let pairs: Vec<(&[f64], &[f64])> = labeled.iter().map(|l| (l.image.as_slice(), l.mask.as_slice())).collect();
    if !quiet {
        eprintln!("training the segmenter on {} slices", pairs.len());
    }
    let history = seg.train(
        &pairs,
        &TrainOptions {
            epochs: get(m, "epochs"),
            lr: get(m, "lr"),
            seed,
            batch_size: get(m, "batch-size"),
        },
    )?;
    write_checkpoint(&path(m, "out").expect("required"), &Model::Segmenter(seg))?;
    print_history(&history)
}

fn suggest(m: &ArgMatches) -> Result<()> {
    let ds = read_dataset(&path(m, "data").expect("required"))?;
    let method: Method = get::<String>(m, "method").parse()?;
    let strategy: Strategy = get::<String>(m, "strategy").parse()?;
    let count: usize = get(m, "m");
    let annotated = match path(m, "annotated") {
        Some(p) => expand(&ds, &read_ids(&p)?)?,
        None => Vec::new(),
    };
    let taken: BTreeSet<&str> = annotated.iter().map(String::as_str).collect();
    let pool_ids: Vec<String> = ds
        .sample_ids(Some(Split::Train), site(m)?)
        .into_iter()
        .filter(|id| !taken.contains(id.as_str()))
        .collect();
    let annotated_units: BTreeSet<String> = units(&ds, &annotated, strategy)?.into_iter().map(|u| u.id).collect();
    let pool: Vec<_> = units(&ds, &pool_ids, strategy)?
        .into_iter()
        .filter(|u| !annotated_units.contains(&u.id))
        .collect();
    if count > pool.len() {
        return Err(Error::PoolExhausted {
            requested: count,
            available: pool.len(),
        });
    }
    let need = |id: &str| path(m, id).ok_or_else(|| usage(format!("--method {method} needs --{id}")));
    let result: SuggestionResult = match method {
        Method::Random => {
            let ids: Vec<String> = pool.iter().map(|u| u.id.clone()).collect();
            suggest_random(&ids, count, get(m, "seed"), strategy)?
        }
        Method::Oracle => suggest_oracle(&load_seg(&need("seg")?)?, &pool, count)?,
        Method::Gradient => {
            let seg = load_seg(&need("seg")?)?;
            let vae = load_vae(&need("vae")?)?;
            need("annotated")?;
            let sources = units(&ds, &annotated, strategy)?;
            let index = build_latent_index(&vae, &pool)?;
            suggest_gradient_guided(&seg, &vae, &sources, &index, count, get(m, "alpha"), get(m, "theta-max"))?
        }
    };
    let text = render_suggestions(&result);
    match path(m, "out") {
        Some(p) => std::fs::write(&p, text).map_err(|e| Error::Io {
            context: format!("writing {}", p.display()),
            source: e,
        }),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

/// Defaults, then the config file, then flags.
fn experiment_config(m: &ArgMatches) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::default();
    if let Some(p) = path(m, "config") {
        let text = std::fs::read_to_string(&p).map_err(|e| Error::Io {
            context: format!("reading {}", p.display()),
            source: e,
        })?;
        cfg.merge_toml(&text)?;
    }
    for key in CONFIG_KEYS {
        if let Some(v) = m.get_one::<String>(key) {
            cfg.set(key, v)?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(m: &ArgMatches, quiet: bool) -> Result<()> {
    let cfg = experiment_config(m)?;
    let jobs: usize = get(m, "jobs");
    let out = path(m, "out").expect("has a default");
    eprintln!("# run (jobs = {jobs}, out = {})", out.display());
    eprint!("{cfg}");
    if jobs == 0 {
        return Err(usage("--jobs must be at least 1"));
    }
    let exp = Experiment::prepare(cfg)?;
    if !quiet {
        if let (Some(first), Some(last)) = (exp.vae_history.first(), exp.vae_history.last()) {
            eprintln!("VAE loss {first:.4} -> {last:.4}");
        }
        if let Some(d) = exp.baseline_dice {
            eprintln!("pretrained segmenter test Dice {d:.4}");
        }
    }
    let progress = |rows: &[gradsuggest::harness::RoundReport]| {
        if !quiet {
            for r in rows {
                eprintln!("{} budget {} seed {}: dice {:.4}", r.method, r.budget, r.seed, r.dice);
            }
        }
    };
    let rows = exp.run_all(jobs, &progress)?;
    for p in emit_report(&rows, &out)? {
        eprintln!("wrote {}", p.display());
    }
    Ok(())
}

fn report(m: &ArgMatches) -> Result<()> {
    let rows = read_report_csv(&path(m, "csv").expect("required"))?;
    if rows.is_empty() {
        return Err(Error::EmptyInput("report has no rows".into()));
    }
    for p in emit_report(&rows, &path(m, "out").expect("required"))? {
        eprintln!("wrote {}", p.display());
    }
    println!("scenario,strategy,method,budget,n,mean,std");
    for a in aggregate(&rows) {
        println!(
            "{},{},{},{},{},{:.4},{:.4}",
            a.scenario,
            a.strategy,
            a.method,
            a.budget,
            a.dices.len(),
            a.mean,
            a.std
        );
    }
    Ok(())
}
