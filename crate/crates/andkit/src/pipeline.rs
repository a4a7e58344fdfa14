//! Curriculum planning, the training loop and checkpoints.
//!
//! A run is an instance-discrimination warm-up followed by `rounds`
//! curriculum rounds. At the start of round `r` the memory bank is frozen
//! into a [`RoundPlan`]: every anchor's k-NN neighbourhood, the entropy of
//! its similarity distribution, and a mask selecting the `⌊N·r/R⌋`
//! lowest-entropy anchors. Selected anchors train with the neighbourhood
//! loss, everything else with the instance loss. The bank itself keeps
//! moving every batch through the EMA update.
//!
//! # Checkpoint layout
//!
//! Little-endian throughout:
//!
//! ```text
//! "ANDC" | u16 version=1
//! config:  u32 rounds | u32 epochs_per_round | u32 init_epochs | u32 batch_size
//!          f64 base_lr | f64 momentum | f64 tau | f64 eta | u32 k | u64 seed
//!          u8 lr_reset_per_round | u8 curriculum | u8 neighbourhoods | u8 reserved=0
//!          u32 completed_rounds
//! encoder: u8 activation | u32 L+1 | (L+1) × u32 layer size
//! params:  per layer, weight (out×in, row-major) then bias, all f64
//! bank:    u32 N | u32 D | N·D f64, row-major
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::affinity::{bank_entropies, build_neighbourhoods, Neighbourhood};
use crate::dataio::make_batches;
use crate::encoder::{backward, forward, Activation, EncoderConfig, EncoderParams, LrSchedule, OptimState};
use crate::memory_bank::FeatureBank;
use crate::numerics::{Mat64, SeededRng};
use crate::objective::round_batch_loss;
use crate::{Error, Result};

/// How anchors are handed the neighbourhood loss across rounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Curriculum {
    /// `⌊N·r/R⌋` lowest-entropy anchors in round `r`, re-planned every round.
    #[default]
    Progressive,
    /// All anchors selected in round 1 and the plan kept for every round.
    OneOff,
    /// No anchor is ever selected: every round trains the instance loss.
    InstanceOnly,
}

impl Curriculum {
    fn id(self) -> u8 {
        match self {
            Curriculum::Progressive => 0,
            Curriculum::OneOff => 1,
            Curriculum::InstanceOnly => 2,
        }
    }

    fn from_id(id: u8) -> Result<Self> {
        match id {
            0 => Ok(Curriculum::Progressive),
            1 => Ok(Curriculum::OneOff),
            2 => Ok(Curriculum::InstanceOnly),
            other => Err(Error::format(format!("unknown curriculum id {other}"))),
        }
    }
}

/// Neighbourhood construction. `Singleton` is a test hook that reduces
/// every neighbourhood to its anchor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NeighbourhoodMode {
    #[default]
    Knn,
    Singleton,
}

impl NeighbourhoodMode {
    fn id(self) -> u8 {
        match self {
            NeighbourhoodMode::Knn => 0,
            NeighbourhoodMode::Singleton => 1,
        }
    }

    fn from_id(id: u8) -> Result<Self> {
        match id {
            0 => Ok(NeighbourhoodMode::Knn),
            1 => Ok(NeighbourhoodMode::Singleton),
            other => Err(Error::format(format!("unknown neighbourhood mode {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub rounds: usize,
    pub epochs_per_round: usize,
    pub init_epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub tau: f64,
    pub eta: f64,
    pub k: usize,
    pub seed: u64,
    pub lr_reset_per_round: bool,
    pub curriculum: Curriculum,
    pub neighbourhoods: NeighbourhoodMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            rounds: 4,
            epochs_per_round: 200,
            init_epochs: 200,
            batch_size: 128,
            base_lr: 0.03,
            momentum: 0.9,
            tau: 0.07,
            eta: 0.5,
            k: 1,
            seed: 0,
            lr_reset_per_round: true,
            curriculum: Curriculum::Progressive,
            neighbourhoods: NeighbourhoodMode::Knn,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::config("rounds must be >= 1"));
        }
        if self.k == 0 {
            return Err(Error::config("k must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be >= 1"));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::config("base_lr must be > 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum must be in [0, 1)"));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::config("tau must be > 0"));
        }
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            return Err(Error::config("eta must be in (0, 1]"));
        }
        Ok(())
    }

    pub fn total_epochs(&self) -> usize {
        self.init_epochs + self.rounds * self.epochs_per_round
    }
}

/// Frozen per-round curriculum state.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundPlan {
    /// 0 for the instance warm-up, otherwise `1..=rounds`.
    pub round: usize,
    /// Consistency entropy per anchor; empty for plans built without ranking.
    pub entropies: Vec<f64>,
    pub selected: Vec<bool>,
    /// One neighbourhood per anchor, indexed by anchor.
    pub neighbourhoods: Vec<Neighbourhood>,
}

impl RoundPlan {
    /// Every sample keeps the instance loss.
    pub fn instance_only(n: usize) -> Self {
        RoundPlan {
            round: 0,
            entropies: Vec::new(),
            selected: vec![false; n],
            neighbourhoods: (0..n).map(Neighbourhood::singleton).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.selected.len()
    }

    pub fn is_empty(&self) -> bool {
        self.selected.is_empty()
    }

    pub fn selected_count(&self) -> usize {
        self.selected.iter().filter(|&&s| s).count()
    }

    pub fn selected_fraction(&self) -> f64 {
        if self.is_empty() {
            0.0
        } else {
            self.selected_count() as f64 / self.len() as f64
        }
    }

    /// The neighbourhood sample `i` trains with, or `None` for the instance loss.
    pub fn neighbourhood_for(&self, i: usize) -> Result<Option<&Neighbourhood>> {
        if i >= self.len() {
            return Err(Error::contract(format!(
                "sample {i} is not covered by a plan over {} samples",
                self.len()
            )));
        }
        Ok(self.selected[i].then(|| &self.neighbourhoods[i]))
    }

    pub fn selected_neighbourhoods(&self) -> impl Iterator<Item = &Neighbourhood> {
        self.neighbourhoods
            .iter()
            .zip(&self.selected)
            .filter_map(|(nb, &s)| s.then_some(nb))
    }
}

/// Number of anchors selected in round `r` of `rounds`: `⌊N·r/R⌋`.
pub fn selected_count(n: usize, r: usize, rounds: usize) -> usize {
    ((n as u128 * r as u128) / rounds as u128) as usize
}

/// Marks the `⌊N·r/R⌋` smallest entropies, ties to the lower index.
pub fn select_anchors(entropies: &[f64], r: usize, rounds: usize) -> Result<Vec<bool>> {
    if rounds == 0 || r == 0 || r > rounds {
        return Err(Error::contract(format!(
            "round {r} outside 1..={rounds}"
        )));
    }
    let n = entropies.len();
    let count = selected_count(n, r, rounds);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| entropies[a].total_cmp(&entropies[b]).then(a.cmp(&b)));
    let mut mask = vec![false; n];
    for &i in &order[..count] {
        mask[i] = true;
    }
    Ok(mask)
}

/// Neighbourhoods, entropies and selection for round `r`, from the bank as
/// it stands.
pub fn plan_round(bank: &FeatureBank, config: &TrainConfig, r: usize) -> Result<RoundPlan> {
    let n = bank.n();
    let neighbourhoods = match config.neighbourhoods {
        NeighbourhoodMode::Knn => {
            if config.k > n - 1 {
                return Err(Error::config(format!(
                    "k = {} needs at least {} samples, have {n}",
                    config.k,
                    config.k + 1
                )));
            }
            build_neighbourhoods(bank, config.k)?
        }
        NeighbourhoodMode::Singleton => (0..n).map(Neighbourhood::singleton).collect(),
    };
    let entropies = bank_entropies(bank, config.tau)?;
    let selected = select_anchors(&entropies, r, config.rounds)?;
    Ok(RoundPlan {
        round: r,
        entropies,
        selected,
        neighbourhoods,
    })
}

/// One line of the metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub round: usize,
    pub epoch: usize,
    pub mean_loss: f64,
    pub selected_fraction: f64,
    pub consistent_count: Option<usize>,
    pub inconsistent_count: Option<usize>,
    pub knn_accuracy: Option<f64>,
}

/// Observer hooks for a training run. Label-aware measurements plug in
/// here so that the loop itself never sees labels.
pub trait TrainMonitor {
    /// Called once a round's plan is fixed, before its first epoch.
    fn on_round(&mut self, _plan: &RoundPlan) -> Result<()> {
        Ok(())
    }

    /// Called after every epoch; may fill optional fields of `record`.
    fn on_epoch(&mut self, _record: &mut MetricsRecord, _params: &EncoderParams, _bank: &FeatureBank) -> Result<()> {
        Ok(())
    }
}

/// A monitor that records nothing.
pub struct NoMonitor;

impl TrainMonitor for NoMonitor {}

/// Starting point of a run: fresh seeded state or a loaded checkpoint.
#[derive(Debug, Clone)]
pub enum WarmStart {
    Fresh,
    From { params: EncoderParams, bank: FeatureBank },
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub params: EncoderParams,
    pub bank: FeatureBank,
    pub metrics: Vec<MetricsRecord>,
    /// Plan used by each round, in order.
    pub plans: Vec<RoundPlan>,
}

struct Loop<'a> {
    inputs: &'a Mat64,
    config: &'a TrainConfig,
    params: EncoderParams,
    bank: FeatureBank,
    optim: OptimState,
    batch_rng: SeededRng,
    epoch: usize,
    metrics: Vec<MetricsRecord>,
}

impl Loop<'_> {
    fn run_epoch(&mut self, plan: &RoundPlan, lr: f64) -> Result<f64> {
        let n = self.inputs.rows();
        let bs = self.config.batch_size.min(n);
        self.optim.lr = lr;
        self.optim.epoch = self.epoch;
        let mut total = 0.0;
        for batch in make_batches(n, bs, &mut self.batch_rng)? {
            let x = self.inputs.select_rows(&batch)?;
            let (feats, cache) = forward(&self.params, &x).map_err(|e| match e {
                Error::DegenerateFeature { sample, norm } => Error::DegenerateFeature {
                    sample: batch[sample],
                    norm,
                },
                other => other,
            })?;
            let loss = round_batch_loss(&batch, &feats, plan, &self.bank, self.config.tau)?;
            let grads = backward(&self.params, &cache, &loss.grads)?;
            crate::encoder::sgd_nesterov_step(&mut self.params, &grads, &mut self.optim)?;
            self.bank.update_batch(&batch, &feats)?;
            total += loss.losses.iter().sum::<f64>();
        }
        Ok(total / n as f64)
    }

    fn run_phase(
        &mut self,
        plan: &RoundPlan,
        epochs: usize,
        schedule: &LrSchedule,
        phase_start: usize,
        monitor: &mut dyn TrainMonitor,
    ) -> Result<()> {
        for e in 0..epochs {
            let sched_epoch = if self.config.lr_reset_per_round {
                e
            } else {
                phase_start + e
            };
            let mean_loss = self.run_epoch(plan, schedule.lr_at(sched_epoch))?;
            let mut record = MetricsRecord {
                round: plan.round,
                epoch: self.epoch,
                mean_loss,
                selected_fraction: plan.selected_fraction(),
                consistent_count: None,
                inconsistent_count: None,
                knn_accuracy: None,
            };
            monitor.on_epoch(&mut record, &self.params, &self.bank)?;
            self.metrics.push(record);
            self.epoch += 1;
        }
        Ok(())
    }
}

/// Runs warm-up plus all curriculum rounds on unlabelled `inputs`.
pub fn train(inputs: &Mat64, encoder: &EncoderConfig, config: &TrainConfig) -> Result<TrainOutput> {
    train_with(inputs, encoder, config, WarmStart::Fresh, &mut NoMonitor)
}

pub fn train_with(
    inputs: &Mat64,
    encoder: &EncoderConfig,
    config: &TrainConfig,
    start: WarmStart,
    monitor: &mut dyn TrainMonitor,
) -> Result<TrainOutput> {
    config.validate()?;
    encoder.validate()?;
    if inputs.cols() != encoder.input_dim() {
        return Err(Error::Dimension {
            expected: encoder.input_dim(),
            actual: inputs.cols(),
        });
    }
    if !inputs.is_finite() {
        return Err(Error::Numeric("non-finite training input".into()));
    }
    let n = inputs.rows();
    let mut rng = SeededRng::new(config.seed);
    let bank_rng_seed = rng.next_u64();
    let batch_rng = rng.fork(2);
    let (params, bank) = match start {
        WarmStart::Fresh => (
            EncoderParams::init(encoder)?,
            FeatureBank::init(n, encoder.output_dim(), config.eta, &mut SeededRng::new(bank_rng_seed))?,
        ),
        WarmStart::From { params, bank } => {
            if params.layer_sizes() != encoder.layer_sizes {
                return Err(Error::config(format!(
                    "checkpoint layer sizes {:?} differ from requested {:?}",
                    params.layer_sizes(),
                    encoder.layer_sizes
                )));
            }
            if bank.n() != n || bank.d() != encoder.output_dim() {
                return Err(Error::config(format!(
                    "checkpoint bank is {}x{}, dataset needs {}x{}",
                    bank.n(),
                    bank.d(),
                    n,
                    encoder.output_dim()
                )));
            }
            (params, bank.with_eta(config.eta)?)
        }
    };
    let optim = OptimState::new(&params, config.base_lr, config.momentum)?;
    let mut lp = Loop {
        inputs,
        config,
        params,
        bank,
        optim,
        batch_rng,
        epoch: 0,
        metrics: Vec::with_capacity(config.total_epochs()),
    };

    // Global schedule: stretched over the whole run and driven by the
    // cumulative epoch. Per-round reset: stretched over each phase.
    let (init_schedule, round_schedule) = if config.lr_reset_per_round {
        (
            LrSchedule::scaled(config.base_lr, config.init_epochs),
            LrSchedule::scaled(config.base_lr, config.epochs_per_round),
        )
    } else {
        let global = LrSchedule::scaled(config.base_lr, config.total_epochs());
        (global, global)
    };

    let warmup = RoundPlan::instance_only(n);
    monitor.on_round(&warmup)?;
    lp.run_phase(&warmup, config.init_epochs, &init_schedule, 0, monitor)?;

    let mut plans = Vec::with_capacity(config.rounds);
    for r in 1..=config.rounds {
        let plan = match config.curriculum {
            Curriculum::Progressive => plan_round(&lp.bank, config, r)?,
            Curriculum::OneOff => match plans.first() {
                Some(first) => RoundPlan {
                    round: r,
                    ..Clone::clone(first)
                },
                None => RoundPlan {
                    round: r,
                    ..plan_round(&lp.bank, config, config.rounds)?
                },
            },
            // neighbourhoods are still discovered for monitoring; none is trained on
            Curriculum::InstanceOnly => {
                let mut plan = plan_round(&lp.bank, config, r)?;
                plan.selected.fill(false);
                plan
            }
        };
        monitor.on_round(&plan)?;
        let phase_start = config.init_epochs + (r - 1) * config.epochs_per_round;
        lp.run_phase(&plan, config.epochs_per_round, &round_schedule, phase_start, monitor)?;
        plans.push(plan);
    }

    Ok(TrainOutput {
        params: lp.params,
        bank: lp.bank,
        metrics: lp.metrics,
        plans,
    })
}

/// Encoder, memory bank and the configuration that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub completed_rounds: usize,
    pub params: EncoderParams,
    pub bank: FeatureBank,
}

const CKPT_MAGIC: &[u8; 4] = b"ANDC";
const CKPT_VERSION: u16 = 1;

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, len: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(len).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::format(format!(
                "checkpoint truncated: wanted {len} bytes at offset {}, file has {}",
                self.pos,
                self.buf.len()
            ))
        })?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::format("length overflow"))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

fn put_u32(buf: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::format(format!("{v} does not fit in u32")))?;
    buf.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

impl Checkpoint {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let c = &self.config;
        let mut buf = Vec::new();
        buf.extend_from_slice(CKPT_MAGIC);
        buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        put_u32(&mut buf, c.rounds)?;
        put_u32(&mut buf, c.epochs_per_round)?;
        put_u32(&mut buf, c.init_epochs)?;
        put_u32(&mut buf, c.batch_size)?;
        for v in [c.base_lr, c.momentum, c.tau, c.eta] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        put_u32(&mut buf, c.k)?;
        buf.extend_from_slice(&c.seed.to_le_bytes());
        buf.extend_from_slice(&[
            c.lr_reset_per_round as u8,
            c.curriculum.id(),
            c.neighbourhoods.id(),
            0,
        ]);
        put_u32(&mut buf, self.completed_rounds)?;

        buf.push(self.params.activation.id());
        let sizes = self.params.layer_sizes();
        put_u32(&mut buf, sizes.len())?;
        for s in sizes {
            put_u32(&mut buf, s)?;
        }
        for v in self.params.values() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        put_u32(&mut buf, self.bank.n())?;
        put_u32(&mut buf, self.bank.d())?;
        for v in self.bank.features().values() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        Ok(buf)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4)? != CKPT_MAGIC {
            return Err(Error::format("bad checkpoint magic, expected ANDC"));
        }
        let version = r.u16()?;
        if version != CKPT_VERSION {
            return Err(Error::format(format!("unsupported checkpoint version {version}")));
        }
        let rounds = r.u32()?;
        let epochs_per_round = r.u32()?;
        let init_epochs = r.u32()?;
        let batch_size = r.u32()?;
        let base_lr = r.f64()?;
        let momentum = r.f64()?;
        let tau = r.f64()?;
        let eta = r.f64()?;
        let k = r.u32()?;
        let seed = r.u64()?;
        let lr_reset_per_round = match r.u8()? {
            0 => false,
            1 => true,
            other => return Err(Error::format(format!("invalid flag byte {other}"))),
        };
        let curriculum = Curriculum::from_id(r.u8()?)?;
        let neighbourhoods = NeighbourhoodMode::from_id(r.u8()?)?;
        r.u8()?;
        let completed_rounds = r.u32()?;
        let config = TrainConfig {
            rounds,
            epochs_per_round,
            init_epochs,
            batch_size,
            base_lr,
            momentum,
            tau,
            eta,
            k,
            seed,
            lr_reset_per_round,
            curriculum,
            neighbourhoods,
        };
        config.validate().map_err(|e| Error::format(format!("checkpoint config invalid: {e}")))?;

        let activation = Activation::from_id(r.u8()?)?;
        let count = r.u32()?;
        if count < 2 {
            return Err(Error::format("checkpoint encoder has no layers"));
        }
        let sizes = (0..count).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let mut params = EncoderParams::init(&EncoderConfig {
            layer_sizes: sizes,
            activation,
            seed: 0,
        })
        .map_err(|e| Error::format(format!("checkpoint encoder invalid: {e}")))?;
        let values = r.f64s(params.num_values())?;
        for (p, v) in params.values_mut().zip(values) {
            *p = v;
        }
        let n = r.u32()?;
        let d = r.u32()?;
        let feats = Mat64::from_vec(n, d, r.f64s(n * d)?)?;
        if r.pos != bytes.len() {
            return Err(Error::format(format!(
                "{} trailing bytes after checkpoint payload",
                bytes.len() - r.pos
            )));
        }
        if d != params.output_dim() {
            return Err(Error::format("bank width differs from encoder output"));
        }
        let bank = FeatureBank::from_unit_rows(feats, eta)
            .map_err(|e| Error::format(format!("checkpoint bank invalid: {e}")))?;
        Ok(Checkpoint {
            config,
            completed_rounds,
            params,
            bank,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Checkpoint::decode(&fs::read(path)?)
    }

    /// Rejects checkpoints whose encoder shape differs from `layer_sizes`.
    pub fn check_layer_sizes(&self, layer_sizes: &[usize]) -> Result<()> {
        let have = self.params.layer_sizes();
        if have != layer_sizes {
            return Err(Error::config(format!(
                "checkpoint layer sizes {have:?} differ from requested {layer_sizes:?}"
            )));
        }
        Ok(())
    }
}
