//! Simulated federated training: broadcast, local training, sample-count
//! weighted averaging and leave-one-domain-out evaluation.

mod ledger;
mod report;

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use ledger::{Endpoint, LedgerEntry, Message, MessageKind, MessageLedger};
pub use report::{round_rows, summarize, write_rounds_csv, AggregateRow, RoundRow, RunSummary, Summary};

use crate::dataset::{domain_letter, DomainData, Sample};
use crate::distbank::{generate_from_spectrum, DistributionBank, LambdaMode};
use crate::episodic::{episodic_step, joint_step, plain_step, EpisodicConfig, LossRecord, SegEpisode};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, EvalReport, HausdorffKind};
use crate::objectives::{label_boundary_masks, BoundaryMasks};
use crate::segnet::{init_params, SegNet, SegNetConfig};
use crate::spectral::{build_mask, forward_dft, FreqMask, Image, Spectrum};
use crate::tape::{AdamConfig, AdamState, ParamSet};

/// Which parts of the episodic method are active. Turning everything off
/// is plain federated averaging.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Method {
    /// Meta-test images are style-transformed with foreign amplitudes;
    /// otherwise the meta-test set is an identity copy of the batch.
    pub cfsi: bool,
    /// Inner update plus meta objective; otherwise one joint step on the
    /// local and meta-test segmentation losses.
    pub bel: bool,
    pub boundary_loss: bool,
}

impl Method {
    pub const FEDAVG: Method = Method {
        cfsi: false,
        bel: false,
        boundary_loss: false,
    };
    pub const ELCFS: Method = Method {
        cfsi: true,
        bel: true,
        boundary_loss: true,
    };

    pub fn is_baseline(&self) -> bool {
        !self.cfsi && !self.bel
    }

    /// `fedavg`, `elcfs`, or the removed parts joined by `+`
    /// (`no_cfsi`, `no_bel+no_boundary_loss`, ...).
    pub fn label(&self) -> String {
        if self.is_baseline() {
            return "fedavg".into();
        }
        let mut parts = Vec::new();
        if !self.cfsi {
            parts.push("no_cfsi");
        }
        if !self.bel {
            parts.push("no_bel");
        }
        if !self.boundary_loss && self.bel {
            parts.push("no_boundary_loss");
        }
        if parts.is_empty() {
            "elcfs".into()
        } else {
            parts.join("+")
        }
    }

    pub fn from_label(label: &str) -> Result<Self> {
        if label == "fedavg" {
            return Ok(Self::FEDAVG);
        }
        let mut m = Self::ELCFS;
        if label == "elcfs" {
            return Ok(m);
        }
        for part in label.split('+') {
            match part {
                "no_cfsi" => m.cfsi = false,
                "no_bel" => m.bel = false,
                "no_boundary_loss" => m.boundary_loss = false,
                other => return Err(Error::Config(format!("unknown method part `{other}`"))),
            }
        }
        Ok(m)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub held_out: u32,
    /// Source domains; all remaining domains when absent.
    pub sources: Option<Vec<u32>>,
    pub method: Method,
    pub rounds: usize,
    pub local_epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub episodic: EpisodicConfig,
    pub alpha: f64,
    pub lambda: LambdaMode,
    pub r_bd: usize,
    pub r_bg: usize,
    pub net: SegNetConfig,
    pub seed: u64,
    /// Evaluate every this many rounds (and always after the last); 0
    /// evaluates only at the end.
    pub eval_interval: usize,
    pub hd_kind: HausdorffKind,
    pub parallel_clients: bool,
    /// Keep encoded messages in the ledger for inspection.
    pub record_payloads: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            held_out: 3,
            sources: None,
            method: Method::ELCFS,
            rounds: 100,
            local_epochs: 1,
            batch: 5,
            lr: 1e-3,
            episodic: EpisodicConfig::default(),
            alpha: 0.01,
            lambda: LambdaMode::default(),
            r_bd: 1,
            r_bg: 3,
            net: SegNetConfig::default(),
            seed: 1,
            eval_interval: 10,
            hd_kind: HausdorffKind::Exact,
            parallel_clients: false,
            record_payloads: false,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self, domains: usize) -> Result<()> {
        if self.held_out as usize >= domains {
            return Err(Error::Config(format!(
                "held-out domain {} does not exist ({} domains)",
                domain_letter(self.held_out),
                domains
            )));
        }
        if let Some(src) = &self.sources {
            if src.is_empty() {
                return Err(Error::Config("no source domains".into()));
            }
            for &s in src {
                if s as usize >= domains || s == self.held_out {
                    return Err(Error::Config(format!("invalid source domain {}", domain_letter(s))));
                }
            }
            let mut sorted = src.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != src.len() {
                return Err(Error::Config("duplicate source domains".into()));
            }
        } else if domains < 2 {
            return Err(Error::Config("need at least one source domain besides the held-out one".into()));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        self.episodic.validate()?;
        self.lambda.validate()?;
        self.net.validate()?;
        build_mask(8, 8, self.alpha)?;
        if self.r_bd < 1 || self.r_bg <= self.r_bd {
            return Err(Error::Config(format!("need r_bg > r_bd >= 1, got {} and {}", self.r_bd, self.r_bg)));
        }
        Ok(())
    }

    /// Ascending source ids.
    pub fn source_ids(&self, domains: usize) -> Vec<u32> {
        let mut ids = match &self.sources {
            Some(s) => s.clone(),
            None => (0..domains as u32).filter(|&d| d != self.held_out).collect(),
        };
        ids.sort_unstable();
        ids
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }
}

/// One simulated client. Its samples and their phase spectra never leave
/// this struct.
pub struct ClientState {
    pub client_id: u32,
    samples: Vec<Sample>,
    spectra: Vec<Spectrum>,
    regions: Vec<Vec<BoundaryMasks>>,
    pub params: ParamSet<f32>,
    pub adam: AdamState<f32>,
    rng: ChaCha8Rng,
}

impl ClientState {
    pub fn new(client_id: u32, samples: Vec<Sample>, params: ParamSet<f32>, cfg: &ExperimentConfig) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptyDataset(client_id));
        }
        let spectra = samples.iter().map(|s| forward_dft(&s.image)).collect::<Result<_>>()?;
        let regions = samples
            .iter()
            .map(|s| label_boundary_masks(&s.label, cfg.r_bd, cfg.r_bg))
            .collect::<Result<_>>()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(u64::from(client_id) + 1);
        Ok(Self {
            client_id,
            samples,
            spectra,
            regions,
            params,
            adam: AdamState::new(),
            rng,
        })
    }

    /// `N^k`.
    pub fn sample_count(&self) -> usize {
        self.samples.len()
    }

    /// Amplitude-only bank entries for this client's samples.
    pub fn bank_messages(&self) -> Result<Vec<crate::distbank::BankEntry>> {
        let images: Vec<&Image> = self.samples.iter().map(|s| &s.image).collect();
        crate::distbank::contribute(self.client_id, &images)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClientRoundStats {
    pub client_id: u32,
    pub samples: usize,
    pub steps: usize,
    pub l_seg_inner: f64,
    pub l_seg_meta: f64,
    pub l_boundary: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationScore {
    pub dice: f64,
    pub hd: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    /// 1-based.
    pub round: usize,
    pub clients: Vec<ClientRoundStats>,
    pub checksum: u64,
    pub validation: Option<ValidationScore>,
    pub wall_ms: u128,
}

/// `Σ (N^k/N)·θ^k`, folded left in the given order in double precision.
pub fn fed_avg(params: &[&ParamSet<f32>], weights: &[f64]) -> Result<ParamSet<f32>> {
    let first = params.first().ok_or_else(|| Error::ParamMismatch("nothing to average".into()))?;
    if weights.len() != params.len() {
        return Err(Error::ParamMismatch(format!("{} weights for {} models", weights.len(), params.len())));
    }
    if weights.iter().any(|w| !(*w > 0.0 && w.is_finite())) {
        return Err(Error::Config("aggregation weights must be positive".into()));
    }
    if params.iter().any(|p| !p.same_schema(first)) {
        return Err(Error::ParamMismatch("client models differ in schema".into()));
    }
    let total: f64 = weights.iter().sum();
    let mut acc = vec![0.0f64; first.numel()];
    for (p, w) in params.iter().zip(weights) {
        let share = w / total;
        for (a, v) in acc.iter_mut().zip(p.flatten()) {
            *a += share * f64::from(v);
        }
    }
    let flat: Vec<f32> = acc.into_iter().map(|v| v as f32).collect();
    first.unflatten(&flat)
}

/// Shared, read-only inputs of local training.
pub struct RoundContext<'a> {
    pub bank: &'a DistributionBank,
    pub mask: Option<&'a FreqMask>,
    pub cfg: &'a ExperimentConfig,
}

fn mean_record(records: &[LossRecord]) -> (f64, f64, f64) {
    if records.is_empty() {
        return (0.0, 0.0, 0.0);
    }
    let n = records.len() as f64;
    (
        records.iter().map(|r| r.l_seg_inner).sum::<f64>() / n,
        records.iter().map(|r| r.l_seg_meta).sum::<f64>() / n,
        records.iter().map(|r| r.l_boundary).sum::<f64>() / n,
    )
}

/// Copies the global model into every client.
pub fn broadcast(global: &ParamSet<f32>, clients: &mut [ClientState]) {
    for c in clients {
        c.params = global.frozen();
    }
}

/// `E` local epochs from the client's current model, in shuffled batches.
pub fn local_train(client: &mut ClientState, ctx: &RoundContext<'_>) -> Result<ClientRoundStats> {
    let cfg = ctx.cfg;
    let adam_cfg = cfg.adam();
    let gamma = if cfg.method.boundary_loss { cfg.episodic.gamma } else { 0.0 };
    let episodic = EpisodicConfig { gamma, ..cfg.episodic };
    let has_foreign = ctx.bank.client_ids().any(|id| id != client.client_id);
    let mut records = Vec::new();
    for _ in 0..cfg.local_epochs {
        let mut order: Vec<usize> = (0..client.samples.len()).collect();
        order.shuffle(&mut client.rng);
        for batch in order.chunks(cfg.batch) {
            let t = if cfg.method.is_baseline() {
                Vec::new()
            } else if cfg.method.cfsi && has_foreign {
                let mask = ctx.mask.ok_or_else(|| Error::Config("frequency mask missing".into()))?;
                let mut copies: Vec<Vec<Image>> = Vec::new();
                for &i in batch {
                    let transformed = generate_from_spectrum(
                        &client.spectra[i],
                        ctx.bank,
                        client.client_id,
                        mask,
                        cfg.lambda,
                        &mut client.rng,
                    )?;
                    copies.resize_with(transformed.len(), Vec::new);
                    for (j, img) in transformed.into_iter().enumerate() {
                        copies[j].push(img);
                    }
                }
                copies
            } else {
                vec![batch.iter().map(|&i| client.samples[i].image.clone()).collect()]
            };
            let episode = SegEpisode {
                net: cfg.net,
                x: batch.iter().map(|&i| &client.samples[i].image).collect(),
                labels: batch.iter().map(|&i| &*client.samples[i].label).collect(),
                t,
                regions: batch.iter().map(|&i| client.regions[i].as_slice()).collect(),
                contrastive: episodic.contrastive,
            };
            let record = match (cfg.method.is_baseline(), cfg.method.bel) {
                (true, _) => plain_step(&mut client.params, &episode, &mut client.adam, &adam_cfg)?,
                (false, true) => episodic_step(&mut client.params, &episode, &episodic, &mut client.adam, &adam_cfg)?,
                (false, false) => joint_step(&mut client.params, &episode, &mut client.adam, &adam_cfg)?,
            };
            records.push(record);
        }
    }
    let (l_seg_inner, l_seg_meta, l_boundary) = mean_record(&records);
    Ok(ClientRoundStats {
        client_id: client.client_id,
        samples: client.sample_count(),
        steps: records.len(),
        l_seg_inner,
        l_seg_meta,
        l_boundary,
    })
}

/// Broadcast, local training on every client, and aggregation in ascending
/// client-id order. `round` is 1-based and only labels ledger entries.
pub fn run_round(
    global: &ParamSet<f32>,
    clients: &mut [ClientState],
    ctx: &RoundContext<'_>,
    round: usize,
    ledger: &mut MessageLedger,
) -> Result<(ParamSet<f32>, Vec<ClientRoundStats>)> {
    if clients.is_empty() {
        return Err(Error::Config("no clients".into()));
    }
    clients.sort_by_key(|c| c.client_id);
    let message = Message::model(global);
    for c in clients.iter() {
        ledger.record(round, Endpoint::Server, Endpoint::Client(c.client_id), &message)?;
    }
    self::broadcast(global, clients);
    let stats: Vec<ClientRoundStats> = if ctx.cfg.parallel_clients {
        clients
            .par_iter_mut()
            .map(|c| local_train(c, ctx))
            .collect::<Result<_>>()?
    } else {
        clients
            .iter_mut()
            .map(|c| local_train(c, ctx))
            .collect::<Result<_>>()?
    };
    for c in clients.iter() {
        ledger.record(round, Endpoint::Client(c.client_id), Endpoint::Server, &Message::model(&c.params))?;
    }
    let models: Vec<&ParamSet<f32>> = clients.iter().map(|c| &c.params).collect();
    let weights: Vec<f64> = clients.iter().map(|c| c.sample_count() as f64).collect();
    Ok((fed_avg(&models, &weights)?, stats))
}

/// Outcome of one leave-one-domain-out run.
#[derive(Clone, Debug)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub sources: Vec<u32>,
    pub rounds: Vec<RoundReport>,
    pub final_eval: EvalReport,
    pub model: SegNet,
    pub ledger: MessageLedger,
}

impl ExperimentReport {
    pub fn label(&self) -> String {
        self.config.method.label()
    }
}

/// Builds the bank from the source clients, shares it, and returns it.
fn build_bank(clients: &[ClientState], ledger: &mut MessageLedger) -> Result<DistributionBank> {
    let mut bank = DistributionBank::new();
    for c in clients {
        let entries = c.bank_messages()?;
        for e in &entries {
            let msg = Message::BankEntry(e.clone());
            for other in clients.iter().filter(|o| o.client_id != c.client_id) {
                ledger.record(0, Endpoint::Client(c.client_id), Endpoint::Client(other.client_id), &msg)?;
            }
        }
        bank.register(c.client_id);
        bank.insert(entries)?;
    }
    Ok(bank)
}

/// Trains on the source domains' training splits and evaluates on every
/// sample of the held-out domain.
pub fn run_experiment(cfg: &ExperimentConfig, domains: &[DomainData]) -> Result<ExperimentReport> {
    cfg.validate(domains.len())?;
    let domain = |id: u32| {
        domains
            .iter()
            .find(|d| d.domain_id == id)
            .ok_or_else(|| Error::Config(format!("domain {} missing", domain_letter(id))))
    };
    let held_out = domain(cfg.held_out)?;
    let eval_set: Vec<Sample> = held_out.all_samples().cloned().collect();
    let sources = cfg.source_ids(domains.len());
    let init = init_params(&cfg.net, cfg.seed)?;
    let mut clients = sources
        .iter()
        .map(|&id| ClientState::new(id, domain(id)?.train.clone(), init.frozen(), cfg))
        .collect::<Result<Vec<_>>>()?;
    let mut ledger = MessageLedger::new(cfg.record_payloads);
    let bank = if cfg.method.cfsi { build_bank(&clients, &mut ledger)? } else { DistributionBank::new() };
    let (h, w, _) = clients[0].samples[0].image.dims();
    let mask = build_mask(h, w, cfg.alpha)?;
    let ctx = RoundContext {
        bank: &bank,
        mask: Some(&mask),
        cfg,
    };
    let mut global = init;
    let mut rounds = Vec::with_capacity(cfg.rounds);
    let mut final_eval = None;
    for r in 1..=cfg.rounds {
        let start = Instant::now();
        let (next, stats) = run_round(&global, &mut clients, &ctx, r, &mut ledger)?;
        global = next;
        let due = r == cfg.rounds || (cfg.eval_interval > 0 && r % cfg.eval_interval == 0);
        let validation = if due {
            let model = SegNet {
                config: cfg.net,
                params: global.frozen(),
            };
            let report = evaluate(&model, &eval_set, cfg.hd_kind)?;
            let score = ValidationScore {
                dice: report.dice.mean,
                hd: report.hd.mean,
            };
            if r == cfg.rounds {
                final_eval = Some(report);
            }
            Some(score)
        } else {
            None
        };
        rounds.push(RoundReport {
            round: r,
            clients: stats,
            checksum: global.checksum(),
            validation,
            wall_ms: start.elapsed().as_millis(),
        });
    }
    let model = SegNet {
        config: cfg.net,
        params: global,
    };
    let final_eval = match final_eval {
        Some(e) => e,
        None => evaluate(&model, &eval_set, cfg.hd_kind)?,
    };
    Ok(ExperimentReport {
        config: cfg.clone(),
        sources,
        rounds,
        final_eval,
        model,
        ledger,
    })
}

/// Thread cap from `FEDDG_THREADS`, else the machine's parallelism.
pub fn thread_cap() -> usize {
    std::env::var("FEDDG_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Runs independent experiments on up to [`thread_cap`] threads. Each run is
/// sequential internally, so results do not depend on scheduling. Reports
/// come back in input order.
pub fn run_many(configs: &[ExperimentConfig], domains: &[DomainData]) -> Result<Vec<ExperimentReport>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(thread_cap())
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| configs.par_iter().map(|c| run_experiment(c, domains)).collect())
}

/// Source sets of sizes `1..=max` drawn from the non-held-out domains in
/// ascending order.
pub fn client_sweep(held_out: u32, domains: usize, sizes: std::ops::RangeInclusive<usize>) -> Result<Vec<Vec<u32>>> {
    let pool: Vec<u32> = (0..domains as u32).filter(|&d| d != held_out).collect();
    sizes
        .map(|n| {
            if n == 0 || n > pool.len() {
                return Err(Error::Config(format!(
                    "cannot pick {n} source clients from {} remaining domains",
                    pool.len()
                )));
            }
            Ok(pool[..n].to_vec())
        })
        .collect()
}
