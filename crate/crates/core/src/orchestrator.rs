//! The round loop.
//!
//! [`Protocol`] holds everything the server coordinates: the global cache, the
//! previous round's broadcast and the byte ledger. It is shared by two
//! drivers:
//!
//! * [`Simulation`] trains real models on the synthetic task;
//! * [`run_transport`] replaces clients with synthetic uploads, which is
//!   enough to exercise the cache protocol and the accounting at full scale
//!   in seconds.
//!
//! Within a round, client steps are independent and run in parallel when the
//! `parallel` feature is on; their outputs are consumed in client-id order, so
//! results do not depend on the thread count.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::Write;
use std::str::FromStr;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::aggregation::{aggregate, AggregationPolicy};
use crate::cache::{ExpiryMode, GlobalCache, LocalCache, Round, RoundUpdatePackage};
use crate::data::{self, LabeledSample, PartitionSpec, SyntheticTaskSpec};
use crate::error::{Error, Result};
use crate::learner::{accuracy, Learner, LinearSoftmaxModel, TrainConfig};
use crate::ledger::{CommLedger, EncodingModel, RoundCost, RoundTraffic};
use crate::rng::{self, substream, Stream};
use crate::soft_label::{SoftLabel, SoftLabelBatch};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Method {
    /// Soft-label caching with cache signals and catch-up.
    Scarlet,
    /// Every sampled label is recomputed and broadcast each round.
    Dsfl,
    /// No communication; clients only train locally.
    Individual,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Scarlet => "SCARLET",
            Method::Dsfl => "DSFL",
            Method::Individual => "INDIVIDUAL",
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().replace(['-', '_'], "").as_str() {
            "SCARLET" => Ok(Method::Scarlet),
            "DSFL" => Ok(Method::Dsfl),
            "INDIVIDUAL" => Ok(Method::Individual),
            _ => Err(Error::Config(format!(
                "unknown method {s:?} (expected SCARLET, DSFL or INDIVIDUAL)"
            ))),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// `⌈p·K⌉` distinct clients, uniform without replacement, sorted by id.
pub fn schedule_participants(num_clients: usize, ratio: f64, round: Round, seed: u64) -> Result<Vec<usize>> {
    if num_clients == 0 {
        return Err(Error::InvalidParameter("no clients to schedule".into()));
    }
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "participation ratio {ratio} outside (0, 1]"
        )));
    }
    // the epsilon keeps products like 0.1 · 100 from rounding up to 11
    let m = ((ratio * num_clients as f64 - 1e-9).ceil() as usize).clamp(1, num_clients);
    if m == num_clients {
        return Ok((0..num_clients).collect());
    }
    let mut picked = index::sample(
        &mut substream(seed, Stream::Participants, round as u64, 0),
        num_clients,
        m,
    )
    .into_vec();
    picked.sort_unstable();
    Ok(picked)
}

/// The public samples of a round and which of them clients must compute.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundPlan {
    pub round: Round,
    pub indices: Vec<usize>,
    pub requested: Vec<usize>,
    pub participants: Vec<usize>,
}

impl RoundPlan {
    pub fn hit_ratio(&self) -> f64 {
        if self.indices.is_empty() {
            return 0.0;
        }
        (self.indices.len() - self.requested.len()) as f64 / self.indices.len() as f64
    }
}

/// What one participant receives before training.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientSync {
    /// The previous round's teacher labels, rebuilt on the client.
    pub teacher: Option<SoftLabelBatch>,
    /// Backfill size if the client was stale, else zero.
    pub catch_up_entries: usize,
}

/// Server-side protocol state.
#[derive(Debug, Clone)]
pub struct Protocol {
    method: Method,
    policy: AggregationPolicy,
    num_classes: usize,
    global: GlobalCache,
    prev_package: Option<RoundUpdatePackage>,
    prev_assembled: Option<SoftLabelBatch>,
    prev_max_age: u32,
    ledger: CommLedger,
}

impl Protocol {
    pub fn new(
        method: Method,
        policy: AggregationPolicy,
        num_classes: usize,
        duration: u32,
        expiry: ExpiryMode,
        encoding: EncodingModel,
    ) -> Self {
        Protocol {
            method,
            policy,
            num_classes,
            global: GlobalCache::new(duration, expiry),
            prev_package: None,
            prev_assembled: None,
            prev_max_age: 0,
            ledger: CommLedger::new(encoding),
        }
    }

    pub fn method(&self) -> Method {
        self.method
    }

    pub fn global_cache(&self) -> &GlobalCache {
        &self.global
    }

    pub fn ledger(&self) -> &CommLedger {
        &self.ledger
    }

    /// Teacher labels assembled in the last committed round.
    pub fn last_assembled(&self) -> Option<&SoftLabelBatch> {
        self.prev_assembled.as_ref()
    }

    /// Update package produced by the last committed round.
    pub fn last_package(&self) -> Option<&RoundUpdatePackage> {
        self.prev_package.as_ref()
    }

    /// Largest age, in rounds, of a label in [`Protocol::last_assembled`].
    pub fn last_max_age(&self) -> u32 {
        self.prev_max_age
    }

    pub fn plan(&self, round: Round, indices: Vec<usize>, participants: Vec<usize>) -> RoundPlan {
        let requested = match self.method {
            Method::Scarlet => self.global.compute_request_list(&indices, round),
            Method::Dsfl => indices.clone(),
            Method::Individual => Vec::new(),
        };
        RoundPlan {
            round,
            indices,
            requested,
            participants,
        }
    }

    /// Bring one participant up to date: backfill if stale, replay the last
    /// update package and check the result against the server's copy.
    pub fn sync_client(&self, cache: &mut LocalCache, round: Round) -> Result<ClientSync> {
        let mut sync = ClientSync {
            teacher: None,
            catch_up_entries: 0,
        };
        match self.method {
            Method::Individual => {}
            Method::Dsfl => sync.teacher = self.prev_assembled.clone(),
            Method::Scarlet => {
                if cache.is_stale(round) {
                    let pkg = self.global.build_catch_up(cache.last_participated_round(), round);
                    sync.catch_up_entries = pkg.len();
                    cache.apply_catch_up(&pkg);
                }
                if let Some(pkg) = &self.prev_package {
                    let rebuilt = cache.apply_update(pkg)?;
                    if Some(&rebuilt) != self.prev_assembled.as_ref() {
                        return Err(Error::Desync(format!(
                            "client reconstruction of round {} labels differs from the server's",
                            pkg.round
                        )));
                    }
                    sync.teacher = Some(rebuilt);
                }
            }
        }
        cache.mark_participated(round);
        Ok(sync)
    }

    /// Aggregate the uploads (one batch per participant, client-id order),
    /// assemble the round's teacher labels, update the cache and charge the
    /// round's traffic. `catch_up` lists the backfill size per participant.
    pub fn commit(&mut self, plan: &RoundPlan, uploads: &[SoftLabelBatch], catch_up: &[usize]) -> Result<RoundCost> {
        let mut traffic = RoundTraffic {
            round: plan.round,
            num_classes: self.num_classes,
            participants: plan.participants.len(),
            requested: plan.requested.len(),
            fresh_count: 0,
            signal_count: 0,
            catch_up_entries: catch_up.to_vec(),
        };
        if self.method == Method::Individual {
            traffic.catch_up_entries.clear();
            return Ok(self.ledger.record(&traffic, 0.0));
        }
        if uploads.iter().any(|u| u.sample_indices() != plan.requested.as_slice()) {
            return Err(Error::Misaligned);
        }
        let aggregated = if plan.requested.is_empty() || uploads.is_empty() {
            SoftLabelBatch::empty()
        } else {
            aggregate(uploads, self.policy)?
        };
        if aggregated.len() != plan.requested.len() {
            return Err(Error::Coverage(
                plan.requested.get(aggregated.len()).copied().unwrap_or(0),
            ));
        }

        match self.method {
            Method::Dsfl => {
                traffic.fresh_count = self.prev_assembled.as_ref().map_or(0, SoftLabelBatch::len);
                self.prev_assembled = Some(aggregated);
                self.prev_max_age = 0;
            }
            Method::Scarlet => {
                if let Some(pkg) = &self.prev_package {
                    traffic.fresh_count = pkg.fresh_count();
                    traffic.signal_count = pkg.signal_count();
                }
                let fresh: HashMap<usize, &SoftLabel> = aggregated.iter().collect();
                let mut labels = Vec::with_capacity(plan.indices.len());
                let mut max_age = 0;
                for &i in &plan.indices {
                    if let Some(l) = fresh.get(&i) {
                        labels.push((*l).clone());
                    } else {
                        let entry = self
                            .global
                            .get(i)
                            .filter(|_| self.global.is_hit(i, plan.round))
                            .ok_or(Error::Coverage(i))?;
                        max_age = max_age.max(plan.round - entry.cached_round);
                        labels.push(entry.label.clone());
                    }
                }
                if max_age > self.global.duration() {
                    return Err(Error::Desync(format!(
                        "round {} teacher label is {max_age} rounds old",
                        plan.round
                    )));
                }
                let assembled = SoftLabelBatch::new(labels, plan.indices.clone())?;
                let signals = self.global.update(&plan.indices, &assembled, plan.round)?;
                self.prev_package = Some(RoundUpdatePackage::from_assembled(plan.round, &assembled, signals)?);
                self.prev_assembled = Some(assembled);
                self.prev_max_age = max_age;
            }
            Method::Individual => unreachable!(),
        }
        Ok(self.ledger.record(&traffic, plan.hit_ratio()))
    }
}

fn map_mut<T: Send, R: Send, F: Fn(usize, &mut T) -> R + Sync + Send>(items: &mut [T], f: F) -> Vec<R> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        items.par_iter_mut().enumerate().map(|(i, t)| f(i, t)).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter_mut().enumerate().map(|(i, t)| f(i, t)).collect()
    }
}

fn map_ref<T: Sync, R: Send, F: Fn(&T) -> R + Sync + Send>(items: &[T], f: F) -> Vec<R> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(f).collect()
    }
}

/// Settings of a learning-free protocol run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransportConfig {
    pub method: Method,
    pub num_clients: usize,
    pub num_classes: usize,
    pub pool_size: usize,
    pub per_round: usize,
    pub rounds: u32,
    pub cache_duration: u32,
    pub expiry: ExpiryMode,
    pub participation_ratio: f64,
    pub aggregation: AggregationPolicy,
    pub seed: u64,
    /// Give every client its own random uploads and local cache, and check
    /// both its reconstruction and its whole cache against the server each
    /// round. When off, one synthetic upload stands in for
    /// all clients and only server state is kept; byte counts are unchanged.
    pub replay_clients: bool,
}

impl TransportConfig {
    /// One hundred clients, 1,000 of 10,000 public samples per round, ten
    /// classes, the cached protocol with `D = 50`.
    pub fn full_scale(method: Method, rounds: u32, seed: u64) -> Self {
        TransportConfig {
            method,
            num_clients: 100,
            num_classes: 10,
            pool_size: 10_000,
            per_round: 1000,
            rounds,
            cache_duration: 50,
            expiry: ExpiryMode::Evict,
            participation_ratio: 1.0,
            aggregation: AggregationPolicy::PlainMean,
            seed,
            replay_clients: false,
        }
    }
}

fn random_label(rng: &mut rng::SimRng, n: usize) -> Result<SoftLabel> {
    let raw: Vec<f64> = (0..n).map(|_| rng.random::<f64>() + 1e-3).collect();
    let total: f64 = raw.iter().sum();
    SoftLabel::new(raw.into_iter().map(|v| v / total).collect())
}

fn random_upload(seed: u64, client: u64, round: Round, indices: &[usize], n: usize) -> Result<SoftLabelBatch> {
    let mut rng = substream(seed, Stream::Upload, client, round as u64);
    let labels = indices
        .iter()
        .map(|_| random_label(&mut rng, n))
        .collect::<Result<Vec<_>>>()?;
    SoftLabelBatch::new(labels, indices.to_vec())
}

/// Observation handed to the [`run_transport`] callback after each round.
pub struct TransportRound<'a> {
    pub plan: &'a RoundPlan,
    pub cost: RoundCost,
    pub protocol: &'a Protocol,
    pub local_caches: &'a [LocalCache],
}

/// Drive the protocol without learning. Returns the final protocol state,
/// whose ledger holds the per-round costs.
pub fn run_transport<F: FnMut(&TransportRound<'_>)>(cfg: &TransportConfig, mut observe: F) -> Result<Protocol> {
    if cfg.per_round > cfg.pool_size || cfg.per_round == 0 || cfg.num_classes < 2 {
        return Err(Error::InvalidParameter("invalid transport configuration".into()));
    }
    cfg.aggregation.validate()?;
    let mut protocol = Protocol::new(
        cfg.method,
        cfg.aggregation,
        cfg.num_classes,
        cfg.cache_duration,
        cfg.expiry,
        EncodingModel::default(),
    );
    let mut locals = if cfg.replay_clients {
        vec![LocalCache::new(cfg.cache_duration, cfg.expiry); cfg.num_clients]
    } else {
        Vec::new()
    };
    let mut last_seen: Vec<Option<Round>> = vec![None; cfg.num_clients];
    for t in 1..=cfg.rounds {
        let participants = schedule_participants(cfg.num_clients, cfg.participation_ratio, t, cfg.seed)?;
        let indices = rng::public_subset(cfg.seed, t, cfg.pool_size, cfg.per_round);
        let plan = protocol.plan(t, indices, participants);

        let (uploads, catch_up) = if cfg.replay_clients {
            let mut is_participant = vec![false; cfg.num_clients];
            plan.participants.iter().for_each(|&k| is_participant[k] = true);
            let proto = &protocol;
            let plan_ref = &plan;
            let results = map_mut(&mut locals, |k, cache| -> Option<Result<(SoftLabelBatch, usize)>> {
                if !is_participant[k] {
                    return None;
                }
                Some((|| {
                    let sync = proto.sync_client(cache, t)?;
                    if !cache.is_synchronized_with(proto.global_cache(), t - 1) {
                        return Err(Error::Desync(format!(
                            "client {k} cache differs from the server's at round {}",
                            t - 1
                        )));
                    }
                    let upload = if cfg.method == Method::Individual {
                        SoftLabelBatch::empty()
                    } else {
                        random_upload(cfg.seed, k as u64, t, &plan_ref.requested, cfg.num_classes)?
                    };
                    Ok((upload, sync.catch_up_entries))
                })())
            });
            let mut uploads = Vec::new();
            let mut catch_up = Vec::new();
            for r in results.into_iter().flatten() {
                let (u, c) = r?;
                uploads.push(u);
                catch_up.push(c);
            }
            if cfg.method == Method::Individual {
                uploads.clear();
            }
            (uploads, catch_up)
        } else {
            let catch_up = plan
                .participants
                .iter()
                .map(|&k| {
                    let stale = t >= 2 && last_seen[k] != Some(t - 1);
                    if stale && cfg.method == Method::Scarlet {
                        protocol.global_cache().build_catch_up(last_seen[k], t).len()
                    } else {
                        0
                    }
                })
                .collect();
            let uploads = if cfg.method == Method::Individual {
                Vec::new()
            } else {
                vec![random_upload(cfg.seed, u64::MAX, t, &plan.requested, cfg.num_classes)?]
            };
            (uploads, catch_up)
        };
        for &k in &plan.participants {
            last_seen[k] = Some(t);
        }
        let cost = protocol.commit(&plan, &uploads, &catch_up)?;
        observe(&TransportRound {
            plan: &plan,
            cost,
            protocol: &protocol,
            local_caches: &locals,
        });
    }
    Ok(protocol)
}

/// Everything that defines a learning run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub method: Method,
    pub rounds: u32,
    pub task: SyntheticTaskSpec,
    pub partition: PartitionSpec,
    pub train: TrainConfig,
    pub aggregation: AggregationPolicy,
    pub cache_duration: u32,
    pub expiry: ExpiryMode,
    pub per_round_public: usize,
    pub participation_ratio: f64,
    pub validation_fraction: f64,
    /// Drives public-subset sampling, participant scheduling and model
    /// initialization. Data and shuffles use the nested seeds.
    pub seed: u64,
}

impl Default for PartitionSpec {
    fn default() -> Self {
        PartitionSpec {
            num_clients: 20,
            dirichlet_alpha: 0.05,
            seed: 0,
        }
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            method: Method::Scarlet,
            rounds: 300,
            task: SyntheticTaskSpec::default(),
            partition: PartitionSpec::default(),
            train: TrainConfig::default(),
            aggregation: AggregationPolicy::EnhancedEra { beta: 1.5 },
            cache_duration: 50,
            expiry: ExpiryMode::Evict,
            per_round_public: 200,
            participation_ratio: 1.0,
            validation_fraction: 0.1,
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    /// Set the run seed and every nested seed to `seed`.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.task.seed = seed;
        self.partition.seed = seed;
        self.train.seed = seed;
        self
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.partition.validate()?;
        self.train.validate()?;
        self.aggregation.validate()?;
        if self.rounds == 0 {
            return Err(Error::Config("rounds must be positive".into()));
        }
        if !(self.participation_ratio > 0.0 && self.participation_ratio <= 1.0) {
            return Err(Error::Config(format!(
                "participation_ratio {} outside (0, 1]",
                self.participation_ratio
            )));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::Config(format!(
                "validation_fraction {} outside [0, 1)",
                self.validation_fraction
            )));
        }
        let public_train = self.task.public_pool_size
            - (if self.validation_fraction > 0.0 {
                ((self.validation_fraction * self.task.public_pool_size as f64).round() as usize).max(1)
            } else {
                0
            });
        if self.per_round_public == 0 || self.per_round_public > public_train {
            return Err(Error::Config(format!(
                "per_round_public {} must be in 1..={public_train} (public training split size)",
                self.per_round_public
            )));
        }
        Ok(())
    }
}

/// Evaluation and traffic of one round.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: Round,
    /// Server model on the full test pool; `NaN` without a server model.
    pub server_test_accuracy: f64,
    /// Client models on their own test shards, averaged over clients that have one.
    pub mean_client_test_accuracy: f64,
    /// Client models on the full test pool, averaged over clients.
    pub mean_client_global_accuracy: f64,
    /// Mean `KL(reference ‖ server)` on the public validation split, the
    /// reference being the policy aggregate of every client's prediction.
    pub server_public_validation_loss: f64,
    pub mean_client_private_validation_loss: f64,
    pub cache_hit_ratio: f64,
    /// Oldest label, in rounds, in this round's assembled teacher set.
    pub teacher_max_age: u32,
    pub participants: usize,
    pub uplink_bytes: u64,
    pub downlink_bytes: u64,
}

/// Model evaluation without traffic information.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub server_test_accuracy: f64,
    pub mean_client_test_accuracy: f64,
    pub mean_client_global_accuracy: f64,
    pub server_public_validation_loss: f64,
    pub mean_client_private_validation_loss: f64,
}

#[derive(Debug, Clone)]
pub struct ClientState<L> {
    pub id: usize,
    pub model: L,
    pub cache: LocalCache,
    pub train: Vec<LabeledSample>,
    pub validation: Vec<LabeledSample>,
    pub test: Vec<LabeledSample>,
}

/// A learning run: task, clients, server model and protocol state.
#[derive(Debug, Clone)]
pub struct Simulation<L: Learner = LinearSoftmaxModel> {
    config: ExperimentConfig,
    public_train: Vec<Vec<f64>>,
    public_validation: Vec<Vec<f64>>,
    test_pool: Vec<LabeledSample>,
    clients: Vec<ClientState<L>>,
    server: L,
    protocol: Protocol,
    metrics: Vec<RoundMetrics>,
    round: Round,
}

fn mean_finite(values: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = values
        .into_iter()
        .filter(|v| v.is_finite())
        .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

/// Probabilities are floored at the smallest normal double so a vanishing
/// prediction yields a large but finite loss.
fn safe_ln(p: f64) -> f64 {
    p.max(f64::MIN_POSITIVE).ln()
}

impl<L: Learner> Simulation<L> {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let task = data::generate_task(&config.task)?;
        let partition = data::partition_dirichlet(&task.private_pool, &config.partition)?;
        let test_shards =
            data::partition_with_proportions(&task.test_pool, &partition.proportions, config.partition.seed, 1)?;
        let (public_train, public_validation) = if config.validation_fraction > 0.0 {
            data::split_public(&task.public_pool, config.validation_fraction)?
        } else {
            (task.public_pool.clone(), Vec::new())
        };

        let mut clients = Vec::with_capacity(config.partition.num_clients);
        for (id, (shard, test)) in partition.shards.into_iter().zip(test_shards).enumerate() {
            let (train, validation) = if shard.is_empty() || config.validation_fraction == 0.0 {
                (shard, Vec::new())
            } else {
                data::split_validation(&shard, config.validation_fraction)?
            };
            let model = L::initialize(
                task.num_classes,
                task.feature_dim,
                &mut substream(config.seed, Stream::ClientInit, id as u64, 0),
            );
            clients.push(ClientState {
                id,
                model,
                cache: LocalCache::new(config.cache_duration, config.expiry),
                train,
                validation,
                test,
            });
        }
        let server = L::initialize(
            task.num_classes,
            task.feature_dim,
            &mut substream(config.seed, Stream::ServerInit, 0, 0),
        );
        let protocol = Protocol::new(
            config.method,
            config.aggregation,
            task.num_classes,
            config.cache_duration,
            config.expiry,
            EncodingModel::default(),
        );
        Ok(Simulation {
            config,
            public_train,
            public_validation,
            test_pool: task.test_pool,
            clients,
            server,
            protocol,
            metrics: Vec::new(),
            round: 0,
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn round(&self) -> Round {
        self.round
    }

    pub fn clients(&self) -> &[ClientState<L>] {
        &self.clients
    }

    pub fn server(&self) -> &L {
        &self.server
    }

    pub fn protocol(&self) -> &Protocol {
        &self.protocol
    }

    pub fn ledger(&self) -> &CommLedger {
        self.protocol.ledger()
    }

    pub fn metrics(&self) -> &[RoundMetrics] {
        &self.metrics
    }

    pub fn public_train(&self) -> &[Vec<f64>] {
        &self.public_train
    }

    pub fn test_pool(&self) -> &[LabeledSample] {
        &self.test_pool
    }

    /// Execute the next round and evaluate the resulting models.
    pub fn run_round(&mut self) -> Result<RoundMetrics> {
        let t = self.round + 1;
        let cfg = &self.config;
        let participants = schedule_participants(self.clients.len(), cfg.participation_ratio, t, cfg.seed)?;
        let indices = if cfg.method == Method::Individual {
            Vec::new()
        } else {
            rng::public_subset(cfg.seed, t, self.public_train.len(), cfg.per_round_public)
        };
        let plan = self.protocol.plan(t, indices, participants);

        let mut is_participant = vec![false; self.clients.len()];
        plan.participants.iter().for_each(|&k| is_participant[k] = true);
        let protocol = &self.protocol;
        let public = &self.public_train;
        let train_cfg = &cfg.train;
        let method = cfg.method;
        let plan_ref = &plan;
        let results = map_mut(
            &mut self.clients,
            |k, client| -> Option<Result<(SoftLabelBatch, usize)>> {
                if !is_participant[k] {
                    return None;
                }
                Some((|| {
                    let sync = protocol.sync_client(&mut client.cache, t)?;
                    if let Some(teacher) = &sync.teacher {
                        let mut rng = substream(train_cfg.seed, Stream::DistillShuffle, k as u64, t as u64);
                        client.model.distill(public, teacher, train_cfg, &mut rng)?;
                    }
                    if !client.train.is_empty() {
                        let mut rng = substream(train_cfg.seed, Stream::LocalShuffle, k as u64, t as u64);
                        client.model.train_local(&client.train, train_cfg, &mut rng)?;
                    }
                    let upload = if method == Method::Individual {
                        SoftLabelBatch::empty()
                    } else {
                        client.model.predict_soft_labels(public, &plan_ref.requested)?
                    };
                    Ok((upload, sync.catch_up_entries))
                })())
            },
        );
        let mut uploads = Vec::with_capacity(plan.participants.len());
        let mut catch_up = Vec::with_capacity(plan.participants.len());
        for r in results.into_iter().flatten() {
            let (u, c) = r?;
            uploads.push(u);
            catch_up.push(c);
        }
        let cost = self.protocol.commit(&plan, &uploads, &catch_up)?;
        if method != Method::Individual {
            if let Some(teacher) = self.protocol.last_assembled() {
                let mut rng = substream(self.config.train.seed, Stream::ServerShuffle, t as u64, 0);
                self.server
                    .distill(&self.public_train, teacher, &self.config.train, &mut rng)?;
            }
        }
        self.round = t;

        let eval = self.evaluate()?;
        let m = RoundMetrics {
            round: t,
            server_test_accuracy: eval.server_test_accuracy,
            mean_client_test_accuracy: eval.mean_client_test_accuracy,
            mean_client_global_accuracy: eval.mean_client_global_accuracy,
            server_public_validation_loss: eval.server_public_validation_loss,
            mean_client_private_validation_loss: eval.mean_client_private_validation_loss,
            cache_hit_ratio: if method == Method::Scarlet {
                plan.hit_ratio()
            } else {
                0.0
            },
            teacher_max_age: self.protocol.last_max_age(),
            participants: plan.participants.len(),
            uplink_bytes: cost.uplink_bytes,
            downlink_bytes: cost.downlink_bytes,
        };
        self.metrics.push(m);
        Ok(m)
    }

    /// Run the remaining rounds up to `config.rounds`.
    pub fn run(&mut self) -> Result<&[RoundMetrics]> {
        while self.round < self.config.rounds {
            self.run_round()?;
        }
        Ok(&self.metrics)
    }

    pub fn evaluate(&self) -> Result<Evaluation> {
        let test_pool = &self.test_pool;
        let val_indices: Vec<usize> = (0..self.public_validation.len()).collect();
        let public_validation = &self.public_validation;
        let per_client = map_ref(&self.clients, |c| -> Result<(f64, f64, f64, Option<SoftLabelBatch>)> {
            let shard_acc = accuracy(&c.model, &c.test)?;
            let global_acc = accuracy(&c.model, test_pool)?;
            let val_loss = if c.validation.is_empty() {
                f64::NAN
            } else {
                let mut total = 0.0;
                for s in &c.validation {
                    total -= safe_ln(c.model.predict(&s.features)?.probs()[s.label]);
                }
                total / c.validation.len() as f64
            };
            let probe = if val_indices.is_empty() {
                None
            } else {
                Some(c.model.predict_soft_labels(public_validation, &val_indices)?)
            };
            Ok((shard_acc, global_acc, val_loss, probe))
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;

        let mean_client_test_accuracy = mean_finite(per_client.iter().map(|r| r.0));
        let mean_client_global_accuracy = mean_finite(per_client.iter().map(|r| r.1));
        let mean_client_private_validation_loss = mean_finite(per_client.iter().map(|r| r.2));

        if self.config.method == Method::Individual {
            return Ok(Evaluation {
                server_test_accuracy: f64::NAN,
                mean_client_test_accuracy,
                mean_client_global_accuracy,
                server_public_validation_loss: f64::NAN,
                mean_client_private_validation_loss,
            });
        }
        let server_test_accuracy = accuracy(&self.server, test_pool)?;
        let probes: Vec<SoftLabelBatch> = per_client.into_iter().filter_map(|r| r.3).collect();
        let server_public_validation_loss = if probes.is_empty() {
            f64::NAN
        } else {
            let reference = aggregate(&probes, self.config.aggregation)?;
            let mut total = 0.0;
            for (i, q) in reference.iter() {
                let p = self.server.predict(&self.public_validation[i])?;
                total += q
                    .probs()
                    .iter()
                    .zip(p.probs())
                    .filter(|(q, _)| **q > 0.0)
                    .map(|(q, p)| q * (q.ln() - safe_ln(*p)))
                    .sum::<f64>();
            }
            total / reference.len() as f64
        };
        Ok(Evaluation {
            server_test_accuracy,
            mean_client_test_accuracy,
            mean_client_global_accuracy,
            server_public_validation_loss,
            mean_client_private_validation_loss,
        })
    }

    /// Columns: round, server_test_accuracy, mean_client_test_accuracy,
    /// mean_client_global_accuracy, server_public_validation_loss,
    /// mean_client_private_validation_loss, cache_hit_ratio, teacher_max_age,
    /// participants, uplink_bytes, downlink_bytes.
    pub fn write_metrics_csv<W: Write>(&self, out: W) -> Result<()> {
        write_metrics_csv(&self.metrics, out)
    }

    pub fn summary(&self) -> RunSummary {
        let last = self.metrics.last().copied();
        let totals = self.ledger().totals();
        RunSummary {
            method: self.config.method,
            rounds_completed: self.round,
            final_server_test_accuracy: last.map_or(f64::NAN, |m| m.server_test_accuracy),
            final_mean_client_test_accuracy: last.map_or(f64::NAN, |m| m.mean_client_test_accuracy),
            final_mean_client_global_accuracy: last.map_or(f64::NAN, |m| m.mean_client_global_accuracy),
            cumulative_uplink_bytes: totals.uplink_bytes,
            cumulative_downlink_bytes: totals.downlink_bytes,
            mean_cache_hit_ratio: mean_finite(self.metrics.iter().map(|m| m.cache_hit_ratio)),
            config: self.config.clone(),
        }
    }

    /// Human-readable state for post-mortem of a failed round.
    pub fn diagnostic_dump(&self, err: &Error) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "error: {err}");
        let _ = writeln!(s, "method: {}", self.config.method);
        let _ = writeln!(s, "last completed round: {}", self.round);
        let g = self.protocol.global_cache();
        let _ = writeln!(
            s,
            "global cache: {} entries, duration {}, expiry {:?}",
            g.len(),
            g.duration(),
            g.mode()
        );
        for c in &self.clients {
            let _ = writeln!(
                s,
                "client {}: last participated {:?}, local cache {} entries, in sync: {}",
                c.id,
                c.cache.last_participated_round(),
                c.cache.len(),
                c.cache.is_synchronized_with(g, self.round)
            );
        }
        s
    }
}

pub fn write_metrics_csv<W: Write>(metrics: &[RoundMetrics], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    if metrics.is_empty() {
        w.write_record([
            "round",
            "server_test_accuracy",
            "mean_client_test_accuracy",
            "mean_client_global_accuracy",
            "server_public_validation_loss",
            "mean_client_private_validation_loss",
            "cache_hit_ratio",
            "teacher_max_age",
            "participants",
            "uplink_bytes",
            "downlink_bytes",
        ])?;
    }
    for m in metrics {
        w.serialize(m)?;
    }
    w.flush()?;
    Ok(())
}

/// Final results plus the configuration that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub method: Method,
    pub rounds_completed: Round,
    pub final_server_test_accuracy: f64,
    pub final_mean_client_test_accuracy: f64,
    pub final_mean_client_global_accuracy: f64,
    pub cumulative_uplink_bytes: u64,
    pub cumulative_downlink_bytes: u64,
    pub mean_cache_hit_ratio: f64,
    pub config: ExperimentConfig,
}

impl RunSummary {
    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}
