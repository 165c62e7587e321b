//! Round-based federated simulation.

use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregation::{
    hybrid_aggregate, hybrid_select_layers, mada_update, mask_distance, DistanceMetric,
    GlobalState, UplinkPayload,
};
use crate::artifact::ModelArtifact;
use crate::config::{BackwardMode, DownlinkMode, FederationConfig};
use crate::data::{knn_metrics, KnnMetrics, MixtureSpec, ToyDataset};
use crate::dp::{privatize, RdpAccountant};
use crate::error::{Error, Result};
use crate::masking::{
    probs_to_scores, sample_mask, scores_to_probs, select_mask, BernoulliParams, BinaryMask,
    ScoreState,
};
use crate::mmd::{
    mmd_loss_against, rbf_mmd, AdamConfig, AdamState, AmaState, Embedding, MomentStats,
};
use crate::net::{init_signed_constant, Gate, SampleBatch, SignedConstantWeights};
use crate::partition::partition;
use crate::rng::{stream, Purpose};

/// Per-client state that survives across rounds.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: u32,
    pub data: ToyDataset<f64>,
    pub adam: AdamState<f64>,
    pub ama: Option<AmaState<f64>>,
}

impl ClientState {
    pub fn new(id: u32, data: ToyDataset<f64>, num_weights: usize, score_lr: f64) -> Self {
        Self {
            id,
            data,
            adam: AdamState::new(
                num_weights,
                AdamConfig {
                    lr: score_lr,
                    ..AdamConfig::scores()
                },
            ),
            ama: None,
        }
    }
}

/// Read-only pieces shared by every client in a round.
pub struct RoundContext<'a> {
    pub config: &'a FederationConfig,
    pub weights: &'a SignedConstantWeights<f64>,
    pub embedding: &'a Embedding<f64>,
    /// Hybrid layer flags, `true` for probability layers.
    pub flags: &'a [bool],
    /// Noise level, when privacy is enabled.
    pub sigma: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct ClientReport {
    pub payload: UplinkPayload,
    /// Full-length mask the client drew for upload.
    pub mask: BinaryMask,
    /// Loss of the last local iteration.
    pub final_loss: f64,
}

/// `I` local score updates starting from `downlink`, then the uplink.
pub fn client_round(
    ctx: &RoundContext<'_>,
    client: &mut ClientState,
    downlink: &ScoreState<f64>,
    round: u32,
) -> Result<ClientReport> {
    let cfg = ctx.config;
    let seed = cfg.master_seed;
    let d = ctx.weights.num_weights();
    if downlink.len() != d {
        return Err(Error::layout("downlink scores", d, downlink.len()));
    }
    let n_local = client.data.len();
    if n_local == 0 {
        return Err(Error::config(format!("client {} holds no data", client.id)));
    }
    let latent_dim = cfg.arch.latent_dim();
    let batch = cfg.batch_size;
    let mut rng = stream(seed, Purpose::LocalTraining, client.id, round);
    let mut scores = downlink.clone();
    let mut final_loss = f64::NAN;

    for iteration in 0..cfg.local_iters {
        let theta = scores_to_probs(&scores);
        let latent = SampleBatch::gaussian(batch, latent_dim, &mut rng);
        let rows: Vec<usize> = (0..batch).map(|_| rng.random_range(0..n_local)).collect();
        let real = client.data.points.select_rows(&rows);
        let stats = MomentStats::of(&ctx.embedding.embed(&real)?);
        let target = match cfg.ama_rate {
            Some(rate) => {
                let flat = stats.to_flat();
                let ama = client
                    .ama
                    .get_or_insert_with(|| AmaState::new(flat.clone(), rate));
                MomentStats::from_flat(ama.update(&flat)?)
            }
            None => stats,
        };
        let trace = match cfg.backward {
            BackwardMode::Expected => ctx.weights.trace(Gate::Probs(&theta), &latent)?,
            BackwardMode::Sampled => {
                let mask = sample_mask(&theta, &mut rng);
                ctx.weights.trace(Gate::Mask(&mask), &latent)?
            }
        };
        let features = ctx.embedding.trace(&trace.output())?;
        let loss = mmd_loss_against(&target, batch >= 2, features.features())?;
        let output_grad = SampleBatch::new(ctx.embedding.backward(&features, &loss.grad));
        let grad = ctx.weights.score_gradient(&trace, &theta, &output_grad)?;
        let step = client.adam.step(&grad)?;
        let next = scores.as_mut_slice();
        for (s, delta) in next.iter_mut().zip(step) {
            *s += delta;
        }
        if !loss.loss.is_finite() || next.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite {
                client: client.id,
                round,
                iteration,
            });
        }
        final_loss = loss.loss;
    }

    let mut theta = scores_to_probs(&scores);
    if let Some(sigma) = ctx.sigma {
        let mut noise_rng = stream(seed, Purpose::DpNoise, client.id, round);
        theta = privatize(&theta, sigma, cfg.privacy.clip_c, &mut noise_rng);
    }
    let mut mask_rng = stream(seed, Purpose::UplinkMask, client.id, round);
    let mask = select_mask(cfg.selection, &theta, &mut mask_rng)?;
    let payload = UplinkPayload::build(round, client.id, &cfg.arch, ctx.flags, &mask, &theta)?;
    Ok(ClientReport {
        payload,
        mask,
        final_loss,
    })
}

#[derive(Debug, Clone)]
pub struct ServerReport {
    pub aggregate: BernoulliParams<f64>,
    pub lambda: f64,
}

/// Aggregates the uplinks and applies the adaptive update. Returns the next
/// global state.
pub fn server_round(
    ctx: &RoundContext<'_>,
    global: &GlobalState<f64>,
    payloads: &[UplinkPayload],
    round: u32,
) -> Result<(GlobalState<f64>, ServerReport)> {
    let cfg = ctx.config;
    let aggregate: BernoulliParams<f64> = hybrid_aggregate(payloads, ctx.flags, &cfg.arch)?;
    let mut rng = stream(cfg.master_seed, Purpose::GlobalMask, 0, round);
    let global_mask = sample_mask(&aggregate, &mut rng);
    let lambda = match cfg.mada.metric {
        DistanceMetric::Off => 1.0,
        metric => mask_distance(&global.prev_global_mask, &global_mask, metric)?,
    };
    let (scores, theta) = mada_update(global, &aggregate, lambda, cfg.mada.space, cfg.score_clamp)?;
    let next = GlobalState {
        scores,
        theta,
        prev_theta: global.theta.clone(),
        prev_global_mask: global_mask,
        round,
    };
    Ok((next, ServerReport { aggregate, lambda }))
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: u32,
    pub participants: Vec<u32>,
    pub lambda: f64,
    /// Normalized Hamming distance between the round-start global mask and
    /// each participant's uploaded mask, in participant order.
    pub local_divergence: Vec<f64>,
    /// Per-participant uplink size in bits.
    pub uplink_bits: Vec<u64>,
    /// Broadcast size per participant in bits.
    pub downlink_bits: u64,
    pub mean_local_loss: f64,
    /// L1 distance between consecutive global probability vectors, per weight.
    pub theta_l1_change: f64,
    pub eval_mmd: Option<f64>,
    pub dp_epsilon_spent: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rbf_mmd: f64,
    pub knn: KnnMetrics,
}

/// Held-out real points: `eval.samples` draws from the data mixture, with
/// components as balanced as the count allows.
pub fn heldout_set(cfg: &FederationConfig) -> Result<ToyDataset<f64>> {
    let per = cfg.eval.samples.div_ceil(cfg.data.centers.len()).max(1);
    let mixture = MixtureSpec {
        n_per_component: per,
        ..cfg.data.clone()
    };
    let mut rng = stream(cfg.master_seed, Purpose::EvalData, 0, 0);
    let full: ToyDataset<f64> = mixture.generate(&mut rng)?;
    let take: Vec<usize> = (0..cfg.eval.samples.min(full.len())).collect();
    Ok(full.subset(&take))
}

/// Fixed evaluation draws: latent codes and uniform variates for the mask.
#[derive(Debug, Clone)]
pub struct Evaluator {
    pub real: SampleBatch<f64>,
    latent: SampleBatch<f64>,
    uniforms: Vec<f64>,
    bandwidth: f64,
    knn_k: usize,
}

impl Evaluator {
    pub fn new(cfg: &FederationConfig, num_weights: usize) -> Result<Self> {
        let real = heldout_set(cfg)?.points;
        let mut rng = stream(cfg.master_seed, Purpose::Eval, 0, 0);
        let latent = SampleBatch::gaussian(real.rows(), cfg.arch.latent_dim(), &mut rng);
        let uniforms = (0..num_weights).map(|_| rng.random::<f64>()).collect();
        Ok(Self {
            real,
            latent,
            uniforms,
            bandwidth: cfg.eval.bandwidth,
            knn_k: cfg.eval.knn_k,
        })
    }

    /// Mask drawn from `theta` with the fixed uniforms.
    pub fn mask_for(&self, theta: &BernoulliParams<f64>) -> BinaryMask {
        BinaryMask::from_bits(
            theta
                .as_slice()
                .iter()
                .zip(&self.uniforms)
                .map(|(&p, &u)| u < p),
        )
    }

    pub fn mmd_of_mask(
        &self,
        weights: &SignedConstantWeights<f64>,
        mask: &BinaryMask,
    ) -> Result<f64> {
        let fake = weights.trace(Gate::Mask(mask), &self.latent)?.output();
        rbf_mmd(&self.real, &fake, self.bandwidth)
    }

    pub fn report(
        &self,
        weights: &SignedConstantWeights<f64>,
        mask: &BinaryMask,
    ) -> Result<EvalReport> {
        let fake = weights.trace(Gate::Mask(mask), &self.latent)?.output();
        let k = self.knn_k.min(self.real.rows().saturating_sub(1)).max(1);
        Ok(EvalReport {
            rbf_mmd: rbf_mmd(&self.real, &fake, self.bandwidth)?,
            knn: knn_metrics(&self.real, &fake, k)?,
        })
    }
}

/// Full simulation state.
pub struct Simulation {
    pub config: FederationConfig,
    pub weights: SignedConstantWeights<f64>,
    pub embedding: Embedding<f64>,
    pub clients: Vec<ClientState>,
    pub global: GlobalState<f64>,
    pub accountant: RdpAccountant,
    pub evaluator: Evaluator,
    flags: Vec<bool>,
    sigma: Option<f64>,
    pool: rayon::ThreadPool,
}

impl Simulation {
    /// Generates the training set, partitions it and initializes everything.
    pub fn new(config: FederationConfig, workers: usize) -> Result<Self> {
        config.validate()?;
        let mut rng = stream(config.master_seed, Purpose::TrainData, 0, 0);
        let train: ToyDataset<f64> = config.data.generate(&mut rng)?;
        let mut rng = stream(config.master_seed, Purpose::Partition, 0, 0);
        let parts = partition(
            &train.labels,
            config.partition,
            config.num_clients,
            &mut rng,
        )?;
        let shards = parts.iter().map(|idx| train.subset(idx)).collect();
        Self::with_shards(config, shards, workers)
    }

    /// Uses caller-supplied client datasets, one per client.
    pub fn with_shards(
        config: FederationConfig,
        shards: Vec<ToyDataset<f64>>,
        workers: usize,
    ) -> Result<Self> {
        config.validate()?;
        if shards.len() != config.num_clients {
            return Err(Error::layout(
                "client shards",
                config.num_clients,
                shards.len(),
            ));
        }
        let weights = init_signed_constant::<f64>(&config.arch, config.master_seed);
        let embedding = config.embedding.build::<f64>()?;
        let d = weights.num_weights();
        let clients = shards
            .into_iter()
            .enumerate()
            .map(|(i, data)| ClientState::new(i as u32, data, d, config.score_lr))
            .collect();
        let scores = ScoreState::constant(d, config.init_score);
        let mut rng = stream(config.master_seed, Purpose::GlobalMask, 0, 0);
        let initial_mask = sample_mask(&scores_to_probs(&scores), &mut rng);
        let global = GlobalState::new(scores, initial_mask)?;
        let flags = hybrid_select_layers(config.arch.num_layers(), &config.hybrid);
        let sigma = config
            .privacy
            .enabled
            .then(|| config.privacy.round_sigma(config.rounds));
        let evaluator = Evaluator::new(&config, d)?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers.max(1))
            .build()
            .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
        Ok(Self {
            config,
            weights,
            embedding,
            clients,
            global,
            accountant: RdpAccountant::default(),
            evaluator,
            flags,
            sigma,
            pool,
        })
    }

    pub fn layer_flags(&self) -> &[bool] {
        &self.flags
    }

    pub fn sigma(&self) -> Option<f64> {
        self.sigma
    }

    /// Client ids taking part in `round`, ascending.
    pub fn participants(&self, round: u32) -> Vec<u32> {
        let k = self.config.num_clients;
        let m = self.config.participants_per_round();
        if m == k {
            return (0..k as u32).collect();
        }
        let mut rng = stream(self.config.master_seed, Purpose::Participation, 0, round);
        let mut ids: Vec<u32> = index::sample(&mut rng, k, m)
            .into_iter()
            .map(|i| i as u32)
            .collect();
        ids.sort_unstable();
        ids
    }

    fn downlink(&self) -> (ScoreState<f64>, u64) {
        let d = self.weights.num_weights() as u64;
        match self.config.downlink {
            DownlinkMode::Scores => (self.global.scores.clone(), 32 * d),
            DownlinkMode::Mask => (
                probs_to_scores(
                    &BernoulliParams::from_mask(&self.global.prev_global_mask),
                    self.config.score_clamp,
                ),
                d,
            ),
        }
    }

    /// Evaluation MMD of the current global probabilities.
    pub fn eval_mmd(&self) -> Result<f64> {
        let mask = self.evaluator.mask_for(&self.global.theta);
        self.evaluator.mmd_of_mask(&self.weights, &mask)
    }

    /// Runs the next round.
    pub fn step(&mut self) -> Result<RoundMetrics> {
        let round = self.global.round + 1;
        let participants = self.participants(round);
        let (downlink, downlink_bits) = self.downlink();
        let ctx = RoundContext {
            config: &self.config,
            weights: &self.weights,
            embedding: &self.embedding,
            flags: &self.flags,
            sigma: self.sigma,
        };
        let selected: Vec<&mut ClientState> = self
            .clients
            .iter_mut()
            .filter(|c| participants.binary_search(&c.id).is_ok())
            .collect();
        let reports: Vec<ClientReport> = self.pool.install(|| {
            selected
                .into_par_iter()
                .map(|c| client_round(&ctx, c, &downlink, round))
                .collect::<Result<_>>()
        })?;
        let start_mask = &self.global.prev_global_mask;
        let local_divergence = reports
            .iter()
            .map(|r| mask_distance(start_mask, &r.mask, DistanceMetric::Hamming))
            .collect::<Result<Vec<_>>>()?;
        let uplink_bits = reports.iter().map(|r| r.payload.uplink_bits()).collect();
        let mean_local_loss =
            reports.iter().map(|r| r.final_loss).sum::<f64>() / reports.len() as f64;
        let payloads: Vec<UplinkPayload> = reports.into_iter().map(|r| r.payload).collect();
        let (next, server) = server_round(&ctx, &self.global, &payloads, round)?;
        let d = next.theta.len().max(1) as f64;
        let theta_l1_change = next
            .theta
            .as_slice()
            .iter()
            .zip(next.prev_theta.as_slice())
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / d;
        self.global = next;

        let dp_epsilon_spent = match self.sigma {
            Some(sigma) => {
                self.accountant
                    .accumulate(sigma, self.config.privacy.sensitivity, 1)?;
                Some(self.accountant.to_dp(self.config.privacy.delta))
            }
            None => None,
        };
        let eval_due = (round as usize).is_multiple_of(self.config.eval.every)
            || round as usize == self.config.rounds;
        let eval_mmd = if eval_due {
            Some(self.eval_mmd()?)
        } else {
            None
        };
        Ok(RoundMetrics {
            round,
            participants,
            lambda: server.lambda,
            local_divergence,
            uplink_bits,
            downlink_bits,
            mean_local_loss,
            theta_l1_change,
            eval_mmd,
            dp_epsilon_spent,
        })
    }

    /// Final supermask drawn from the global probabilities with the
    /// configured selection mode.
    pub fn final_mask(&self) -> Result<BinaryMask> {
        let mut rng = stream(self.config.master_seed, Purpose::Supermask, 0, 0);
        select_mask(self.config.selection, &self.global.theta, &mut rng)
    }

    pub fn artifact(&self) -> Result<ModelArtifact> {
        ModelArtifact::from_weights(&self.weights, self.final_mask()?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub rounds: u32,
    pub num_weights: usize,
    pub initial_eval_mmd: f64,
    pub final_eval: EvalReport,
    pub total_uplink_bits: u64,
    pub total_downlink_bits: u64,
    pub dp_epsilon_spent: Option<f64>,
    pub noise_sigma: Option<f64>,
    pub accountant: Option<RdpAccountant>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub metrics: Vec<RoundMetrics>,
    pub summary: RunSummary,
    pub artifact: ModelArtifact,
    pub final_theta: BernoulliParams<f64>,
}

/// Runs every configured round. `sink` sees each round's metrics as soon as
/// they exist, so partial logs survive an aborted run.
pub fn run_federation<F>(
    config: &FederationConfig,
    workers: usize,
    mut sink: F,
) -> Result<RunOutput>
where
    F: FnMut(&RoundMetrics) -> Result<()>,
{
    let sim = Simulation::new(config.clone(), workers)?;
    drive(sim, &mut sink)
}

/// Runs a prepared simulation to completion.
pub fn drive<F>(mut sim: Simulation, sink: &mut F) -> Result<RunOutput>
where
    F: FnMut(&RoundMetrics) -> Result<()>,
{
    let initial_eval_mmd = sim.eval_mmd()?;
    let mut metrics = Vec::with_capacity(sim.config.rounds);
    for _ in 0..sim.config.rounds {
        let m = sim.step()?;
        sink(&m)?;
        metrics.push(m);
    }
    let artifact = sim.artifact()?;
    let final_eval = sim.evaluator.report(&sim.weights, artifact.mask())?;
    let total_uplink_bits = metrics.iter().flat_map(|m| &m.uplink_bits).sum();
    let total_downlink_bits = metrics
        .iter()
        .map(|m| m.downlink_bits * m.participants.len() as u64)
        .sum();
    let private = sim.sigma.is_some();
    let summary = RunSummary {
        rounds: sim.config.rounds as u32,
        num_weights: sim.weights.num_weights(),
        initial_eval_mmd,
        final_eval,
        total_uplink_bits,
        total_downlink_bits,
        dp_epsilon_spent: private.then(|| sim.accountant.to_dp(sim.config.privacy.delta)),
        noise_sigma: sim.sigma,
        accountant: private.then(|| sim.accountant.clone()),
    };
    Ok(RunOutput {
        metrics,
        summary,
        artifact,
        final_theta: sim.global.theta.clone(),
    })
}
