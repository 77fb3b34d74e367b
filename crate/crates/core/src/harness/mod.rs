//! Experiment protocol: random initial half, train, suggest the other half,
//! retrain, evaluate on held-out patients; repeated over seeds and budgets.

mod config;
mod report;

use std::collections::BTreeSet;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{
    generate_phantom_dataset, read_dataset, Annotator, Cohort, Dataset, Labeled, PhantomSpec, Sample, Site, Split,
    Strategy,
};
use crate::error::{Error, Result};
use crate::models::{SegArch, SegModel, TrainOptions, VaeArch, VaeModel};
use crate::sampling::{
    build_latent_index, hard_dice, suggest_gradient_guided, suggest_oracle, suggest_random, units, Method, Unit,
};

pub use config::{ExperimentConfig, Scenario, CONFIG_KEYS};
pub use report::{aggregate, emit_report, read_report_csv, render_svg, write_report_csv, Aggregate, CSV_HEADER};

/// Outcome of one (method, budget, seed) round.
#[derive(Clone, Debug, PartialEq)]
pub struct RoundReport {
    pub scenario: Scenario,
    pub method: Method,
    pub strategy: Strategy,
    pub budget: usize,
    pub seed: u64,
    /// Mean per-slice Dice score on the test split.
    pub dice: f64,
    pub annotated_slices: usize,
    pub context_slices: usize,
    pub fallbacks: usize,
    /// Zero unless timing is enabled.
    pub wall_ms: u64,
}

/// Mean per-slice Dice score of the thresholded prediction.
pub fn evaluate_dice(model: &SegModel, test: &[&Sample], threshold: f64) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::EmptyInput("no test slices".into()));
    }
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::contract(format!("threshold must lie in (0, 1), got {threshold}")));
    }
    let images: Vec<Vec<f64>> = test.iter().map(|s| s.image_f64()).collect();
    let refs: Vec<&[f64]> = images.iter().map(Vec::as_slice).collect();
    let probs = model.predict(&refs)?;
    let mut total = 0.0;
    for (s, p) in test.iter().zip(&probs) {
        let mask = s
            .mask_f64()
            .ok_or_else(|| Error::contract(format!("test slice {} has no ground truth", s.sample_id)))?;
        total += hard_dice(p, &mask, threshold);
    }
    Ok(total / test.len() as f64)
}

fn train_on(model: &mut SegModel, labeled: &[Labeled], epochs: usize, lr: f64, batch: usize, seed: u64) -> Result<()> {
    if epochs == 0 {
        return Ok(());
    }
    // a training set, not a sequence: the order in which units were picked must not matter
    let mut sorted: Vec<&Labeled> = labeled.iter().collect();
    sorted.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
    let pairs: Vec<(&[f64], &[f64])> = sorted.iter().map(|l| (l.image.as_slice(), l.mask.as_slice())).collect();
    let opts = TrainOptions {
        epochs,
        lr,
        seed,
        batch_size: batch,
    };
    model.train(&pairs, &opts)?;
    Ok(())
}

/// Seeds of the independent random decisions of one round.
struct RoundSeeds {
    initial_pick: u64,
    init_weights: u64,
    train_initial: u64,
    suggest: u64,
    train_after: u64,
}

impl RoundSeeds {
    fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        RoundSeeds {
            initial_pick: rng.random(),
            init_weights: rng.random(),
            train_initial: rng.random(),
            suggest: rng.random(),
            train_after: rng.random(),
        }
    }
}

/// Sizes of the suggestion batches when `total` suggestions are spread over
/// `rounds`; earlier rounds take the remainder.
fn round_sizes(total: usize, rounds: usize) -> Vec<usize> {
    (0..rounds)
        .map(|r| total / rounds + usize::from(r < total % rounds))
        .collect()
}

/// Shared state of one experiment: data, the VAE manifold and, in the
/// transfer scenario, the site-A pretrained segmenter.
pub struct Experiment {
    pub config: ExperimentConfig,
    pub dataset: Dataset,
    pub vae: VaeModel,
    pub vae_history: Vec<f64>,
    pub pretrained: Option<SegModel>,
    /// Test Dice score of the pretrained segmenter before any adaptation.
    pub baseline_dice: Option<f64>,
    pool_ids: Vec<String>,
    test_ids: Vec<String>,
}

impl Experiment {
    /// Builds or loads the data, checks every budget against the pool, then
    /// trains the VAE (and the pretrained segmenter for transfer).
    pub fn prepare(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let dataset = match &config.data {
            Some(dir) => read_dataset(dir)?,
            None => generate_phantom_dataset(&Self::phantom_spec(&config))?,
        };
        let (pool_site, pretrain_site) = match config.scenario {
            Scenario::Scratch => (None, None),
            Scenario::Transfer => (Some(Site::B), Some(Site::A)),
        };
        let pool_ids = dataset.sample_ids(Some(Split::Train), pool_site);
        let test_ids = dataset.sample_ids(Some(Split::Test), pool_site);
        let pool_units = units(&dataset, &pool_ids, config.strategy)?.len();
        if let Some(&b) = config.budgets.iter().find(|&&b| b > pool_units) {
            return Err(Error::Config(format!(
                "budget {b} exceeds the pool of {pool_units} {} units",
                config.strategy
            )));
        }
        if test_ids.is_empty() {
            return Err(Error::Config("the scenario has no test patients".into()));
        }
        let pretrain_ids = match pretrain_site {
            Some(site) => {
                let ids = dataset.sample_ids(Some(Split::Train), Some(site));
                if ids.is_empty() {
                    return Err(Error::Config(format!("no site {site} training patients to pretrain on")));
                }
                ids
            }
            None => Vec::new(),
        };

        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_0f_e4e7);
        let (vae_seed, pre_init, pre_train): (u64, u64, u64) = (rng.random(), rng.random(), rng.random());
        let arch = VaeArch {
            latent_dim: config.latent_dim,
            ..VaeArch::desk(dataset.height, dataset.width)
        };
        let mut vae = VaeModel::new(arch, vae_seed)?;
        let images: Vec<Vec<f64>> = pool_ids
            .iter()
            .map(|id| dataset.sample(id).map(Sample::image_f64))
            .collect::<Result<_>>()?;
        let refs: Vec<&[f64]> = images.iter().map(Vec::as_slice).collect();
        let vae_history = vae.train(
            &refs,
            &TrainOptions {
                epochs: config.vae_epochs,
                lr: config.vae_lr,
                seed: vae_seed,
                batch_size: config.batch_size,
            },
        )?;

        let mut exp = Experiment {
            config,
            dataset,
            vae,
            vae_history,
            pretrained: None,
            baseline_dice: None,
            pool_ids,
            test_ids,
        };
        if pretrain_site.is_some() {
            let cfg = &exp.config;
            let mut seg = SegModel::new(SegArch::desk(exp.dataset.height, exp.dataset.width), pre_init)?;
            let mut ann = Annotator::new(Strategy::Patient);
            let labeled = ann.annotate(&exp.dataset, &pretrain_ids)?;
            train_on(&mut seg, &labeled, cfg.pretrain_epochs, cfg.seg_lr, cfg.batch_size, pre_train)?;
            exp.baseline_dice = Some(evaluate_dice(&seg, &exp.test_samples()?, cfg.threshold)?);
            exp.pretrained = Some(seg);
        }
        Ok(exp)
    }

    /// Phantom cohorts of a scenario: mixed sites for scratch; site A for
    /// pretraining plus site B for adaptation in transfer.
    pub fn phantom_spec(config: &ExperimentConfig) -> PhantomSpec {
        let (tr, te) = (config.train_patients, config.test_patients);
        let cohorts = match config.scenario {
            Scenario::Scratch => vec![
                Cohort {
                    site: Site::A,
                    train: tr.div_ceil(2),
                    test: te.div_ceil(2),
                },
                Cohort {
                    site: Site::B,
                    train: tr / 2,
                    test: te / 2,
                },
            ],
            Scenario::Transfer => vec![
                Cohort {
                    site: Site::A,
                    train: tr,
                    test: 0,
                },
                Cohort {
                    site: Site::B,
                    train: tr,
                    test: te,
                },
            ],
        };
        PhantomSpec {
            height: config.height,
            width: config.width,
            slices_per_patient: config.slices,
            ..PhantomSpec::desk(config.data_seed, cohorts)
        }
    }

    pub fn pool_ids(&self) -> &[String] {
        &self.pool_ids
    }

    pub fn test_ids(&self) -> &[String] {
        &self.test_ids
    }

    fn test_samples(&self) -> Result<Vec<&Sample>> {
        self.test_ids.iter().map(|id| self.dataset.sample(id)).collect()
    }

    /// Sample ids behind unit ids. Pools hold whole patients, so a patient
    /// unit stands for all of its slices.
    fn slices_of(&self, unit_ids: &[String]) -> Result<Vec<String>> {
        let mut out = Vec::new();
        for id in unit_ids {
            match self.config.strategy {
                Strategy::Image => out.push(id.clone()),
                Strategy::Patient => out.extend(
                    self.dataset
                        .patient_slices(id)?
                        .iter()
                        .map(|s| s.sample_id.clone()),
                ),
            }
        }
        Ok(out)
    }

    /// The initial model of a (budget, seed) pair, shared by every method.
    fn initial(&self, budget: usize, seeds: &RoundSeeds) -> Result<(SegModel, Vec<String>)> {
        let cfg = &self.config;
        let pool = units(&self.dataset, &self.pool_ids, cfg.strategy)?;
        let ids: Vec<String> = pool.iter().map(|u| u.id.clone()).collect();
        let initial = suggest_random(&ids, budget / 2, seeds.initial_pick, cfg.strategy)?.selected_ids;
        let mut model = match &self.pretrained {
            Some(m) => m.clone(),
            None => SegModel::new(SegArch::desk(self.dataset.height, self.dataset.width), seeds.init_weights)?,
        };
        let mut ann = Annotator::new(cfg.strategy);
        let labeled = ann.annotate(&self.dataset, &self.slices_of(&initial)?)?;
        train_on(&mut model, &labeled, cfg.epochs_initial, cfg.seg_lr, cfg.batch_size, seeds.train_initial)?;
        Ok((model, initial))
    }

    /// Suggestion rounds and retraining for one method from a given initial state.
    fn finish(
        &self,
        method: Method,
        budget: usize,
        seed: u64,
        seeds: &RoundSeeds,
        mut model: SegModel,
        initial: &[String],
    ) -> Result<RoundReport> {
        let cfg = &self.config;
        let started = Instant::now();
        let mut ann = Annotator::new(cfg.strategy);
        let mut labeled = ann.annotate(&self.dataset, &self.slices_of(initial)?)?;
        let mut chosen: Vec<String> = initial.to_vec();
        let mut fallbacks = 0;
        let mut rng = ChaCha8Rng::seed_from_u64(seeds.suggest);
        let mut train_rng = ChaCha8Rng::seed_from_u64(seeds.train_after);
        for m in round_sizes(budget / 2, cfg.rounds) {
            let taken: BTreeSet<&str> = chosen.iter().map(String::as_str).collect();
            let remaining_ids: Vec<String> = self
                .pool_ids
                .iter()
                .filter(|id| !ann.is_annotated(id))
                .cloned()
                .collect();
            let remaining: Vec<Unit> = units(&self.dataset, &remaining_ids, cfg.strategy)?
                .into_iter()
                .filter(|u| !taken.contains(u.id.as_str()))
                .collect();
            let picked = match method {
                Method::Random => {
                    let ids: Vec<String> = remaining.iter().map(|u| u.id.clone()).collect();
                    suggest_random(&ids, m, rng.random(), cfg.strategy)?
                }
                Method::Oracle => suggest_oracle(&model, &remaining, m)?,
                Method::Gradient => {
                    let index = build_latent_index(&self.vae, &remaining)?;
                    let sources = units(&self.dataset, &self.slices_of(&chosen)?, cfg.strategy)?;
                    suggest_gradient_guided(&model, &self.vae, &sources, &index, m, cfg.alpha, cfg.theta_max)?
                }
            };
            fallbacks += picked.fallback_count;
            labeled.extend(ann.annotate(&self.dataset, &self.slices_of(&picked.selected_ids)?)?);
            chosen.extend(picked.selected_ids);
            train_on(&mut model, &labeled, cfg.epochs_after, cfg.seg_lr, cfg.batch_size, train_rng.random())?;
        }

        let test: BTreeSet<&str> = self.test_ids.iter().map(String::as_str).collect();
        if let Some(id) = ann.annotated().iter().find(|id| test.contains(id.as_str())) {
            return Err(Error::contract(format!("test slice {id} leaked into training")));
        }
        if self.config.scenario == Scenario::Transfer {
            for id in ann.annotated() {
                if self.dataset.sample(id)?.site != Site::B {
                    return Err(Error::contract(format!("transfer round annotated non-B slice {id}")));
                }
            }
        }
        let dice = evaluate_dice(&model, &self.test_samples()?, cfg.threshold)?;
        Ok(RoundReport {
            scenario: cfg.scenario,
            method,
            strategy: cfg.strategy,
            budget,
            seed,
            dice,
            annotated_slices: ann.labeled_slices(),
            context_slices: ann.context_slices(),
            fallbacks,
            wall_ms: if cfg.timing {
                started.elapsed().as_millis() as u64
            } else {
                0
            },
        })
    }

    /// Every configured method at one (budget, seed), sharing the initial model.
    pub fn run_seed(&self, budget: usize, seed: u64) -> Result<Vec<RoundReport>> {
        let seeds = RoundSeeds::new(seed);
        let started = Instant::now();
        let (model, initial) = self.initial(budget, &seeds)?;
        let shared_ms = started.elapsed().as_millis() as u64;
        self.config
            .methods
            .iter()
            .map(|&method| {
                let mut r = self.finish(method, budget, seed, &seeds, model.clone(), &initial)?;
                if self.config.timing {
                    r.wall_ms += shared_ms;
                }
                Ok(r)
            })
            .collect()
    }

    /// A single method at one (budget, seed).
    pub fn run_round(&self, method: Method, budget: usize, seed: u64) -> Result<RoundReport> {
        let seeds = RoundSeeds::new(seed);
        let (model, initial) = self.initial(budget, &seeds)?;
        self.finish(method, budget, seed, &seeds, model, &initial)
    }

    /// All (budget, repeat) pairs on up to `jobs` threads. Rows come back
    /// ordered by method, budget and seed whatever the scheduling.
    pub fn run_all(&self, jobs: usize, progress: &(dyn Fn(&[RoundReport]) + Sync)) -> Result<Vec<RoundReport>> {
        let cfg = &self.config;
        let items: Vec<(usize, u64)> = cfg
            .budgets
            .iter()
            .flat_map(|&b| (0..cfg.repeats as u64).map(move |r| (b, cfg.seed + r)))
            .collect();
        let slots: Vec<Mutex<Option<Result<Vec<RoundReport>>>>> = items.iter().map(|_| Mutex::new(None)).collect();
        let next = AtomicUsize::new(0);
        let worker = || loop {
            let i = next.fetch_add(1, Ordering::SeqCst);
            let Some(&(budget, seed)) = items.get(i) else {
                break;
            };
            let out = self.run_seed(budget, seed);
            if let Ok(rows) = &out {
                progress(rows);
            }
            *slots[i].lock().unwrap() = Some(out);
        };
        std::thread::scope(|s| {
            for _ in 1..jobs.max(1).min(items.len()) {
                s.spawn(worker);
            }
            worker();
        });
        let mut rows = Vec::with_capacity(items.len() * cfg.methods.len());
        for slot in slots {
            rows.extend(slot.into_inner().unwrap().expect("every item ran")?);
        }
        let order = |m: Method| cfg.methods.iter().position(|&x| x == m);
        rows.sort_by(|a, b| {
            (order(a.method), a.budget, a.seed).cmp(&(order(b.method), b.budget, b.seed))
        });
        Ok(rows)
    }
}

/// Prepares the experiment and runs every round.
pub fn run_experiment(config: ExperimentConfig, jobs: usize) -> Result<Vec<RoundReport>> {
    Experiment::prepare(config)?.run_all(jobs, &|_| {})
}
