//! Sequence training stages, the modality-dropout protocol for the fusion
//! model, and evaluation over noise conditions.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use crate::ctc::{best_alignment, ctc_loss_from_logits, LabelSequence};
use crate::decode::{best_path_decode, cer};
use crate::error::{Error, Result};
use crate::features::{append_deltas, concat, mean_normalize, mix_noise_at_snr, FeatureSequence};
use crate::fusion::{decision_fuse, gamma_from_kl, pseudo_log_likelihood, utterance_kl, ClassPriors, FusionConfig};
use crate::network::{clip_gradients, network_backward, network_forward, posteriors, sgd_step, NetworkParams};
use crate::numerics::{argmax, Rng};
use crate::schedule::{EpochReport, Newbob, NewbobConfig, Step};

/// Audio-only epochs run after the fusion model's main schedule.
pub const FINISHING_EPOCHS: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Am,
    Bn,
    Lip,
    Fusion,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Am => "am",
            Stage::Bn => "bn",
            Stage::Lip => "lip",
            Stage::Fusion => "fusion",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "am" => Ok(Stage::Am),
            "bn" => Ok(Stage::Bn),
            "lip" => Ok(Stage::Lip),
            "fusion" => Ok(Stage::Fusion),
            _ => Err(Error::InvalidArgument(format!("unknown stage `{s}` (expected am, bn, lip or fusion)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub stage: Stage,
    pub schedule: NewbobConfig,
    /// hard cap on scheduled epochs
    pub max_epochs: usize,
    pub seed: u64,
    pub clip_norm: f64,
    /// value written into a switched-off modality
    pub fill_value: f64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        if self.max_epochs == 0 {
            return Err(Error::Config("max_epochs must be positive".into()));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config("clip norm must be positive".into()));
        }
        Ok(())
    }
}

/// One training or validation sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct CtcExample {
    pub id: String,
    pub features: FeatureSequence,
    pub label: LabelSequence,
}

/// Which part of a fused `[audio ‖ video]` input is kept.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    AudioVisual,
    VideoOnly,
    AudioOnly,
}

/// Replaces the switched-off sub-vector with `fill`. `audio_dim` is the
/// width of the leading audio block.
pub fn apply_modality(features: &FeatureSequence, audio_dim: usize, modality: Modality, fill: f64) -> FeatureSequence {
    let mut out = features.clone();
    match modality {
        Modality::AudioVisual => {}
        Modality::VideoOnly => out.fill_columns(0..audio_dim, fill),
        Modality::AudioOnly => out.fill_columns(audio_dim..features.dim(), fill),
    }
    out
}

/// Percentage of frames whose argmax posterior matches the best CTC
/// alignment of the reference under the same model. Infeasible
/// utterances are left out.
pub fn cv_frame_accuracy(model: &NetworkParams, cv: &[CtcExample]) -> Result<f64> {
    let mut correct = 0usize;
    let mut total = 0usize;
    for ex in cv {
        let post = posteriors(model, &ex.features)?;
        let path = match best_alignment(&post, &ex.label) {
            Ok(p) => p,
            Err(Error::Infeasible { .. }) => continue,
            Err(e) => return Err(e),
        };
        total += path.len();
        correct += post
            .matrix()
            .row_iter()
            .zip(&path)
            .filter(|(row, &k)| argmax(row) == k)
            .count();
    }
    if total == 0 {
        return Err(Error::Empty("cross-validation set has no usable utterances"));
    }
    Ok(100.0 * correct as f64 / total as f64)
}

/// One SGD update on one sequence; returns its loss, or `None` when the
/// label cannot be aligned to the input.
fn sgd_on_sequence(
    model: &mut NetworkParams,
    features: &FeatureSequence,
    label: &LabelSequence,
    id: &str,
    lr: f64,
    clip_norm: f64,
) -> Result<Option<f64>> {
    let (logits, cache) = network_forward(model, features)?;
    let (loss, d_logits) = match ctc_loss_from_logits(&logits, label) {
        Ok(v) => v,
        Err(e @ Error::Infeasible { .. }) => {
            log::warn!("skipping {id}: {e}");
            return Ok(None);
        }
        Err(e) => return Err(e),
    };
    let mut grads = network_backward(model, &cache, &d_logits)?;
    clip_gradients(&mut grads, clip_norm);
    sgd_step(model, &grads, lr)?;
    Ok(Some(loss))
}

struct EpochStats {
    loss: f64,
    used: usize,
}

fn run_epoch(
    model: &mut NetworkParams,
    presentations: &[(usize, Modality)],
    data: &[CtcExample],
    audio_dim: usize,
    config: &TrainConfig,
    lr: f64,
) -> Result<EpochStats> {
    let mut stats = EpochStats { loss: 0.0, used: 0 };
    for &(i, modality) in presentations {
        let ex = &data[i];
        let input = apply_modality(&ex.features, audio_dim, modality, config.fill_value);
        if let Some(loss) = sgd_on_sequence(model, &input, &ex.label, &ex.id, lr, config.clip_norm)? {
            stats.loss += loss;
            stats.used += 1;
        }
    }
    if stats.used == 0 {
        return Err(Error::Empty("no feasible training utterances"));
    }
    if !model.squared_norm().is_finite() {
        return Err(Error::NonFinite("model parameters diverged"));
    }
    Ok(stats)
}

fn report(epoch: usize, stats: &EpochStats, cv_accuracy: f64, lr: f64, started: Instant) -> EpochReport {
    EpochReport {
        epoch,
        loss: stats.loss / stats.used as f64,
        cv_accuracy,
        learning_rate: lr,
        seconds: started.elapsed().as_secs_f64(),
    }
}

fn check_sets(train: &[CtcExample], cv: &[CtcExample]) -> Result<()> {
    if train.is_empty() {
        return Err(Error::Empty("training set"));
    }
    if cv.is_empty() {
        return Err(Error::Empty("cross-validation set"));
    }
    Ok(())
}

/// Per-utterance CTC training with newbob control on cv frame accuracy.
/// The utterance order is reshuffled every epoch.
pub fn train_ctc_stage(
    mut model: NetworkParams,
    train: &[CtcExample],
    cv: &[CtcExample],
    config: &TrainConfig,
) -> Result<(NetworkParams, Vec<EpochReport>)> {
    config.validate()?;
    check_sets(train, cv)?;
    let mut schedule = Newbob::new(config.schedule.clone(), cv_frame_accuracy(&model, cv)?)?;
    let mut rng = Rng::new(config.seed);
    let mut order: Vec<(usize, Modality)> = (0..train.len()).map(|i| (i, Modality::AudioVisual)).collect();
    let mut reports = Vec::new();
    for epoch in 1..=config.max_epochs {
        let started = Instant::now();
        let lr = schedule.learning_rate();
        rng.shuffle(&mut order);
        let stats = run_epoch(&mut model, &order, train, 0, config, lr)?;
        let acc = cv_frame_accuracy(&model, cv)?;
        let r = report(epoch, &stats, acc, lr, started);
        log::info!("{} epoch {r}", config.stage);
        reports.push(r);
        if schedule.record(acc) == Step::Stop {
            break;
        }
    }
    Ok((model, reports))
}

/// Fusion-model protocol: every epoch presents each utterance twice, once
/// with both modalities and once with the audio block switched off, in
/// shuffled order. After the schedule stops, [`FINISHING_EPOCHS`] epochs
/// with the video block switched off follow at the final rate. Validation
/// accuracy is measured on audio-visual input.
pub fn train_fusion_stage(
    mut model: NetworkParams,
    train: &[CtcExample],
    cv: &[CtcExample],
    audio_dim: usize,
    config: &TrainConfig,
) -> Result<(NetworkParams, Vec<EpochReport>)> {
    config.validate()?;
    check_sets(train, cv)?;
    if audio_dim == 0 || audio_dim >= model.input_dim() {
        return Err(Error::InvalidArgument(format!(
            "audio block width {audio_dim} must split the {}-dim fused input",
            model.input_dim()
        )));
    }
    let mut schedule = Newbob::new(config.schedule.clone(), cv_frame_accuracy(&model, cv)?)?;
    let mut rng = Rng::new(config.seed);
    let mut order: Vec<(usize, Modality)> = (0..train.len())
        .flat_map(|i| [(i, Modality::AudioVisual), (i, Modality::VideoOnly)])
        .collect();
    let mut reports = Vec::new();
    let mut epoch = 0;
    while epoch < config.max_epochs {
        epoch += 1;
        let started = Instant::now();
        let lr = schedule.learning_rate();
        rng.shuffle(&mut order);
        let stats = run_epoch(&mut model, &order, train, audio_dim, config, lr)?;
        let acc = cv_frame_accuracy(&model, cv)?;
        let r = report(epoch, &stats, acc, lr, started);
        log::info!("{} epoch {r}", config.stage);
        reports.push(r);
        if schedule.record(acc) == Step::Stop {
            break;
        }
    }
    let lr = schedule.learning_rate();
    let mut audio_only: Vec<(usize, Modality)> = (0..train.len()).map(|i| (i, Modality::AudioOnly)).collect();
    for _ in 0..FINISHING_EPOCHS {
        epoch += 1;
        let started = Instant::now();
        rng.shuffle(&mut audio_only);
        let stats = run_epoch(&mut model, &audio_only, train, audio_dim, config, lr)?;
        let acc = cv_frame_accuracy(&model, cv)?;
        let r = report(epoch, &stats, acc, lr, started);
        log::info!("{} audio-only epoch {r}", config.stage);
        reports.push(r);
    }
    Ok((model, reports))
}

/// Audio condition of an evaluation row.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AudioCondition {
    Clean,
    Snr(f64),
    Off,
}

impl fmt::Display for AudioCondition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AudioCondition::Clean => f.write_str("clean"),
            AudioCondition::Snr(db) => write!(f, "{db}dB"),
            AudioCondition::Off => f.write_str("OFF"),
        }
    }
}

impl FromStr for AudioCondition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "OFF" {
            return Ok(AudioCondition::Off);
        }
        Ok(match crate::config::parse_condition(s)? {
            None => AudioCondition::Clean,
            Some(db) => AudioCondition::Snr(db),
        })
    }
}

/// Static audio features of an utterance under a condition: noise mixed
/// in at the requested SNR, then mean normalization and deltas.
pub fn audio_features(clean_static: &FeatureSequence, noise: &FeatureSequence, snr_db: Option<f64>) -> Result<FeatureSequence> {
    let mixed = match snr_db {
        None => clean_static.clone(),
        Some(db) => mix_noise_at_snr(clean_static, noise, db)?,
    };
    Ok(append_deltas(&mean_normalize(&mixed)))
}

/// A test utterance with everything evaluation needs.
#[derive(Clone, Debug)]
pub struct EvalUtterance {
    pub id: String,
    pub reference: LabelSequence,
    /// clean static audio before normalization
    pub audio_static: FeatureSequence,
    /// input features of the lip-reading model
    pub lip_input: FeatureSequence,
    /// visual block of the fusion model's input
    pub fusion_video: FeatureSequence,
    /// babble at least as long as the utterance
    pub noise: FeatureSequence,
}

pub struct Models<'a> {
    pub acoustic: &'a NetworkParams,
    pub lip: &'a NetworkParams,
    pub fusion: &'a NetworkParams,
    pub priors: &'a ClassPriors,
    pub fusion_config: &'a FusionConfig,
    pub fill_value: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FusionKind {
    Feature,
    Decision,
}

impl FusionKind {
    pub fn label(self) -> &'static str {
        match self {
            FusionKind::Feature => "RNN_av",
            FusionKind::Decision => "RNN_a+RNN_v",
        }
    }
}

impl FromStr for FusionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "RNN_av" => Ok(FusionKind::Feature),
            "RNN_a+RNN_v" => Ok(FusionKind::Decision),
            _ => Err(Error::format("results", format!("unknown model `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResultRow {
    pub model: FusionKind,
    pub audio: AudioCondition,
    pub visual: bool,
    pub cer: f64,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct ResultsTable {
    pub rows: Vec<ResultRow>,
}

impl ResultsTable {
    pub fn get(&self, model: FusionKind, audio: AudioCondition, visual: bool) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.model == model && r.audio == audio && r.visual == visual)
            .map(|r| r.cer)
    }

    /// `model\taudio_cond\tvisual\tcer`, one row per line.
    pub fn to_tsv(&self) -> String {
        self.rows
            .iter()
            .map(|r| {
                format!(
                    "{}\t{}\t{}\t{:.2}\n",
                    r.model.label(),
                    r.audio,
                    if r.visual { "ON" } else { "OFF" },
                    r.cer
                )
            })
            .collect()
    }

    pub fn parse_tsv(text: &str) -> Result<Self> {
        let rows = text
            .lines()
            .filter(|l| !l.is_empty())
            .map(|line| {
                let cols: Vec<&str> = line.split('\t').collect();
                let [model, audio, visual, value] = cols.as_slice() else {
                    return Err(Error::format("results", format!("expected 4 columns in {line:?}")));
                };
                Ok(ResultRow {
                    model: model.parse()?,
                    audio: audio.parse()?,
                    visual: match *visual {
                        "ON" => true,
                        "OFF" => false,
                        v => return Err(Error::format("results", format!("bad visual flag `{v}`"))),
                    },
                    cer: value
                        .parse()
                        .map_err(|e| Error::format("results", format!("{value:?}: {e}")))?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(ResultsTable { rows })
    }

    /// Human-readable table.
    pub fn render(&self) -> String {
        let mut out = format!("{:<12} {:<7} {:<7} {:>7}\n", "Model", "Audio", "Visual", "CER %");
        for r in &self.rows {
            out.push_str(&format!(
                "{:<12} {:<7} {:<7} {:>7.2}\n",
                r.model.label(),
                r.audio.to_string(),
                if r.visual { "ON" } else { "OFF" },
                r.cer
            ));
        }
        out
    }
}

/// Row order: clean audio-only, clean AV, video-only, then audio-only and
/// AV for each SNR, for the feature-fusion model and then for decision
/// fusion.
pub fn condition_grid(snr_levels: &[f64]) -> Vec<(AudioCondition, bool)> {
    let mut grid = vec![
        (AudioCondition::Clean, false),
        (AudioCondition::Clean, true),
        (AudioCondition::Off, true),
    ];
    for &db in snr_levels {
        grid.push((AudioCondition::Snr(db), false));
        grid.push((AudioCondition::Snr(db), true));
    }
    grid
}

/// Scores of one utterance for one model and condition.
pub fn condition_scores(
    models: &Models<'_>,
    utt: &EvalUtterance,
    kind: FusionKind,
    audio: AudioCondition,
    visual: bool,
) -> Result<crate::numerics::Matrix> {
    if audio == AudioCondition::Off && !visual {
        return Err(Error::InvalidArgument("both modalities switched off".into()));
    }
    let audio_feats = match audio {
        AudioCondition::Clean => Some(audio_features(&utt.audio_static, &utt.noise, None)?),
        AudioCondition::Snr(db) => Some(audio_features(&utt.audio_static, &utt.noise, Some(db))?),
        AudioCondition::Off => None,
    };
    match kind {
        FusionKind::Feature => {
            let audio_dim = models.fusion.input_dim() - utt.fusion_video.dim();
            let a = match audio_feats {
                Some(a) => a,
                None => FeatureSequence::new(crate::numerics::Matrix::filled(
                    utt.fusion_video.len(),
                    audio_dim,
                    models.fill_value,
                ))?,
            };
            if a.dim() != audio_dim {
                return Err(Error::DimensionMismatch {
                    context: "fusion model audio block",
                    expected: audio_dim,
                    found: a.dim(),
                });
            }
            let mut input = concat(&a, &utt.fusion_video)?;
            if !visual {
                input.fill_columns(audio_dim..input.dim(), models.fill_value);
            }
            pseudo_log_likelihood(&posteriors(models.fusion, &input)?, models.priors)
        }
        FusionKind::Decision => {
            let post_a = audio_feats.map(|a| posteriors(models.acoustic, &a)).transpose()?;
            let post_v = if visual { Some(posteriors(models.lip, &utt.lip_input)?) } else { None };
            match (post_a, post_v) {
                (Some(pa), Some(pv)) => {
                    let gamma = gamma_from_kl(utterance_kl(&pv, &pa)?, models.fusion_config);
                    decision_fuse(&pa, &pv, gamma, models.priors)
                }
                (Some(pa), None) => pseudo_log_likelihood(&pa, models.priors),
                (None, Some(pv)) => pseudo_log_likelihood(&pv, models.priors),
                (None, None) => Err(Error::InvalidArgument("both modalities switched off".into())),
            }
        }
    }
}

/// Decodes the test set under every condition for both fusion strategies.
pub fn evaluate_conditions(models: &Models<'_>, test: &[EvalUtterance], snr_levels: &[f64]) -> Result<ResultsTable> {
    if test.is_empty() {
        return Err(Error::Empty("test set"));
    }
    let references: Vec<LabelSequence> = test.iter().map(|u| u.reference.clone()).collect();
    let mut table = ResultsTable::default();
    for kind in [FusionKind::Feature, FusionKind::Decision] {
        for (audio, visual) in condition_grid(snr_levels) {
            let hyps = test
                .iter()
                .map(|u| Ok(best_path_decode(&condition_scores(models, u, kind, audio, visual)?)?.hypothesis))
                .collect::<Result<Vec<_>>>()?;
            let value = cer(&hyps, &references)?;
            log::info!("{} audio={audio} visual={visual}: CER {value:.2}", kind.label());
            table.rows.push(ResultRow {
                model: kind,
                audio,
                visual,
                cer: value,
            });
        }
    }
    Ok(table)
}
