//! The staged experiment driven from a [`RunConfig`]: files in the data
//! directory come from [`crate::corpus::generate_corpus`], everything else
//! lives in the work directory.
//!
//! | stage | needs | writes |
//! |-------|-------|--------|
//! | am | corpus | `am.modl`, `am.log` |
//! | bn | am | `labels/*.flab`, `priors.prio`, `bn.modl`, `bn.log`, `bnfeat/*.feat` |
//! | lip | bn | `lip.modl`, `lip.log` |
//! | fusion | bn | `fusion.modl`, `fusion.log` |
//! | tune-bias | am, lip | `bias.txt` |
//! | evaluate | am, lip, fusion | `results.tsv`, `results.txt` |

use std::path::{Path, PathBuf};

use crate::bottleneck::{
    extract_bottleneck, generate_frame_labels, train_cross_entropy, DnnParams, DnnTrainConfig, FrameDataset,
    FrameLabelSequence,
};
use crate::config::{LipInput, RunConfig, StageSettings};
use crate::corpus::{render_babble, CorpusSpec, Grammar, RenderProfile, CORPUS_DESCRIPTION};
use crate::ctc::{Alphabet, LabelSequence};
use crate::decode::{best_path_decode, format_decode_line};
use crate::error::{Error, Result};
use crate::features::{append_deltas, concat, mean_normalize, splice, FeatureSequence};
use crate::formats::{
    decode_prio, encode_prio, read_blocks, read_feat, read_flab, read_manifest, write_blocks, write_feat, write_file,
    write_flab, UtteranceRecord,
};
use crate::fusion::{estimate_priors, tune_bias, ClassPriors, FusionConfig, FusionItem, PRIOR_FLOOR};
use crate::network::{posteriors, NetworkParams, Topology};
use crate::numerics::{Matrix, Rng};
use crate::schedule::{EpochReport, NewbobConfig};
use crate::trainer::{
    audio_features, condition_scores, evaluate_conditions, train_ctc_stage, train_fusion_stage, AudioCondition,
    CtcExample, EvalUtterance, FusionKind, Models, ResultsTable, Stage, TrainConfig,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Cv,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Cv, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Cv => "cv",
            Split::Test => "test",
        }
    }

    fn index(self) -> u64 {
        self as u64
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "cv" => Ok(Split::Cv),
            "test" => Ok(Split::Test),
            _ => Err(Error::InvalidArgument(format!("unknown split `{s}` (expected train, cv or test)"))),
        }
    }
}

/// Raw streams of one corpus utterance.
#[derive(Clone, Debug)]
pub struct Utterance {
    pub record: UtteranceRecord,
    pub audio: FeatureSequence,
    pub video: FeatureSequence,
    pub label: LabelSequence,
}

/// A run configuration together with the description of its corpus.
#[derive(Clone, Debug)]
pub struct Workspace {
    pub config: RunConfig,
    pub corpus: CorpusSpec,
    pub grammar: Grammar,
    profile: RenderProfile,
}

// RNG stream tags, kept apart from the corpus' per-utterance streams by
// mixing them into a derived seed.
const INIT_STREAM: u64 = 1;
const SHUFFLE_STREAM: u64 = 2;
const NOISE_SALT: u64 = 0x6e6f_6973_6500;

fn stage_index(stage: Stage) -> u64 {
    match stage {
        Stage::Am => 0,
        Stage::Bn => 1,
        Stage::Lip => 2,
        Stage::Fusion => 3,
    }
}

impl Workspace {
    pub fn open(config: RunConfig) -> Result<Self> {
        let desc = config.data_dir.join(CORPUS_DESCRIPTION);
        if !desc.exists() {
            return Err(Error::MissingStage {
                stage: "gen-corpus".into(),
                path: desc,
            });
        }
        let text = std::fs::read_to_string(&desc).map_err(|e| Error::io(&desc, e))?;
        let corpus = CorpusSpec::parse(&text)?;
        let profile = corpus.render_profile()?;
        Ok(Workspace {
            config,
            corpus,
            grammar: Grammar::default(),
            profile,
        })
    }

    pub fn work_path(&self, name: &str) -> PathBuf {
        self.config.work_dir.join(name)
    }

    pub fn model_path(&self, stage: Stage) -> PathBuf {
        self.work_path(&format!("{stage}.modl"))
    }

    pub fn log_path(&self, stage: Stage) -> PathBuf {
        self.work_path(&format!("{stage}.log"))
    }

    fn label_path(&self, id: &str) -> PathBuf {
        self.work_path("labels").join(format!("{id}.flab"))
    }

    fn bnfeat_path(&self, id: &str) -> PathBuf {
        self.work_path("bnfeat").join(format!("{id}.feat"))
    }

    pub fn priors_path(&self) -> PathBuf {
        self.work_path("priors.prio")
    }

    pub fn bias_path(&self) -> PathBuf {
        self.work_path("bias.txt")
    }

    fn require(&self, stage: &str, path: &Path) -> Result<()> {
        if path.exists() {
            Ok(())
        } else {
            Err(Error::MissingStage {
                stage: stage.to_string(),
                path: path.to_path_buf(),
            })
        }
    }

    fn require_stage(&self, stage: Stage) -> Result<()> {
        self.require(stage.name(), &self.model_path(stage))
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<Utterance>> {
        let manifest = self.config.data_dir.join(format!("{}.tsv", split.name()));
        let alphabet = Alphabet::default();
        read_manifest(&manifest)?
            .into_iter()
            .map(|record| {
                let audio = read_feat(&record.audio_path)?;
                let video = read_feat(&record.video_path)?;
                if audio.len() != video.len() {
                    return Err(Error::format(
                        "corpus",
                        format!("{}: audio has {} frames, video {}", record.id, audio.len(), video.len()),
                    ));
                }
                let label = alphabet.encode(&record.transcript)?;
                Ok(Utterance {
                    record,
                    audio,
                    video,
                    label,
                })
            })
            .collect()
    }

    /// Mean-normalized audio with deltas.
    pub fn acoustic_input(&self, u: &Utterance) -> FeatureSequence {
        append_deltas(&mean_normalize(&u.audio))
    }

    /// Mean-normalized video with symmetric context.
    pub fn spliced_video(&self, u: &Utterance) -> FeatureSequence {
        splice(&mean_normalize(&u.video), self.config.bn_context, self.config.bn_context)
    }

    /// Stored bottleneck activations, mean-normalized, with deltas.
    pub fn bottleneck_input(&self, u: &Utterance) -> Result<FeatureSequence> {
        let path = self.bnfeat_path(&u.record.id);
        self.require("bn", &path)?;
        Ok(append_deltas(&mean_normalize(&read_feat(&path)?)))
    }

    pub fn lip_input(&self, u: &Utterance, kind: LipInput) -> Result<FeatureSequence> {
        match kind {
            LipInput::Bottleneck => self.bottleneck_input(u),
            LipInput::Raw => Ok(self.spliced_video(u)),
        }
    }

    pub fn fusion_input(&self, u: &Utterance) -> Result<FeatureSequence> {
        concat(&self.acoustic_input(u), &self.bottleneck_input(u)?)
    }

    /// Babble for utterance `index` of `split`, independent of the SNR.
    pub fn babble(&self, split: Split, index: usize, len: usize) -> Result<FeatureSequence> {
        let mut rng = Rng::with_stream(self.corpus.seed ^ NOISE_SALT ^ split.index(), index as u64);
        render_babble(&self.grammar, &self.profile, len, self.config.babble_talkers, &mut rng)
    }

    fn stage_settings(&self, stage: Stage) -> &StageSettings {
        match stage {
            Stage::Am => &self.config.am,
            Stage::Lip => &self.config.lip,
            _ => &self.config.fusion,
        }
    }

    /// Training configuration of a recurrent stage.
    pub fn train_config(&self, stage: Stage) -> TrainConfig {
        let s = self.stage_settings(stage);
        TrainConfig {
            stage,
            schedule: NewbobConfig {
                initial_lr: s.learning_rate,
                halving_threshold: self.config.halving_threshold,
                stop_threshold: self.config.stop_threshold,
                min_epochs: s.min_epochs,
            },
            max_epochs: s.max_epochs,
            seed: Rng::with_stream(self.config.seed, SHUFFLE_STREAM + 16 * stage_index(stage)).next_u64(),
            clip_norm: self.config.clip_norm,
            fill_value: self.config.fill_value,
        }
    }

    /// Freshly initialized recurrent model for a stage.
    pub fn initial_model(&self, stage: Stage, input_dim: usize) -> Result<NetworkParams> {
        let topology = Topology {
            input_dim,
            hidden: self.config.hidden,
            layers: self.stage_settings(stage).layers,
            classes: Alphabet::default().size(),
        };
        let mut rng = Rng::with_stream(self.config.seed, INIT_STREAM + 16 * stage_index(stage));
        NetworkParams::random(topology, &mut rng)
    }

    pub fn load_network(&self, stage: Stage) -> Result<NetworkParams> {
        self.require_stage(stage)?;
        NetworkParams::from_blocks(read_blocks(&self.model_path(stage))?)
    }

    fn save_network(&self, stage: Stage, model: &NetworkParams) -> Result<()> {
        let blocks = model.blocks();
        write_blocks(&self.model_path(stage), blocks.iter().map(|(n, m)| (n.as_str(), *m)))
    }

    pub fn load_bottleneck(&self) -> Result<DnnParams> {
        self.require_stage(Stage::Bn)?;
        DnnParams::from_blocks(read_blocks(&self.model_path(Stage::Bn))?)
    }

    fn save_bottleneck(&self, params: &DnnParams) -> Result<()> {
        let (marker, blocks) = params.checkpoint_blocks();
        let mut all: Vec<(&str, &Matrix)> = vec![("dnn.bottleneck", &marker)];
        all.extend(blocks.iter().map(|(n, m)| (n.as_str(), *m)));
        write_blocks(&self.model_path(Stage::Bn), all)
    }

    pub fn load_priors(&self) -> Result<ClassPriors> {
        let path = self.priors_path();
        self.require("bn", &path)?;
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        ClassPriors::new(decode_prio(&bytes)?, PRIOR_FLOOR)
    }

    fn write_log(&self, stage: Stage, reports: &[EpochReport]) -> Result<()> {
        let text: String = reports.iter().map(|r| format!("{r}\n")).collect();
        write_file(&self.log_path(stage), text.as_bytes())
    }

    fn ctc_examples<F>(&self, data: &[Utterance], input: F) -> Result<Vec<CtcExample>>
    where
        F: Fn(&Utterance) -> Result<FeatureSequence>,
    {
        data.iter()
            .map(|u| {
                Ok(CtcExample {
                    id: u.record.id.clone(),
                    features: input(u)?,
                    label: u.label.clone(),
                })
            })
            .collect()
    }

    /// Training and cv examples for the lip-reading model.
    pub fn lip_examples(&self, kind: LipInput) -> Result<(Vec<CtcExample>, Vec<CtcExample>)> {
        let train = self.ctc_examples(&self.load_split(Split::Train)?, |u| self.lip_input(u, kind))?;
        let cv = self.ctc_examples(&self.load_split(Split::Cv)?, |u| self.lip_input(u, kind))?;
        Ok((train, cv))
    }

    pub fn train_am(&self) -> Result<Vec<EpochReport>> {
        let train = self.ctc_examples(&self.load_split(Split::Train)?, |u| Ok(self.acoustic_input(u)))?;
        let cv = self.ctc_examples(&self.load_split(Split::Cv)?, |u| Ok(self.acoustic_input(u)))?;
        let model = self.initial_model(Stage::Am, train[0].features.dim())?;
        let (model, reports) = train_ctc_stage(model, &train, &cv, &self.train_config(Stage::Am))?;
        self.save_network(Stage::Am, &model)?;
        self.write_log(Stage::Am, &reports)?;
        Ok(reports)
    }

    /// Frame labels from the acoustic model for the train and cv splits,
    /// priors from the train labels, the bottleneck network, and
    /// bottleneck features for every split.
    pub fn train_bn(&self) -> Result<Vec<EpochReport>> {
        let am = self.load_network(Stage::Am)?;
        let train = self.load_split(Split::Train)?;
        let cv = self.load_split(Split::Cv)?;
        let label = |u: &Utterance| -> Result<FrameLabelSequence> {
            let l = generate_frame_labels(&am, &self.acoustic_input(u))?;
            write_flab(&self.label_path(&u.record.id), l.as_slice())?;
            Ok(l)
        };
        let train_labels = train.iter().map(label).collect::<Result<Vec<_>>>()?;
        let cv_labels = cv.iter().map(label).collect::<Result<Vec<_>>>()?;
        let priors = estimate_priors(train_labels.iter().map(FrameLabelSequence::as_slice), am.classes())?;
        write_file(&self.priors_path(), &encode_prio(priors.probs())?)?;

        let train_in: Vec<FeatureSequence> = train.iter().map(|u| self.spliced_video(u)).collect();
        let cv_in: Vec<FeatureSequence> = cv.iter().map(|u| self.spliced_video(u)).collect();
        let train_set = FrameDataset::from_utterances(train_in.iter().zip(&train_labels))?;
        let cv_set = FrameDataset::from_utterances(cv_in.iter().zip(&cv_labels))?;

        let mut widths = vec![train_set.inputs.cols()];
        widths.extend(&self.config.bn_hidden);
        widths.push(am.classes());
        let mut rng = Rng::with_stream(self.config.seed, INIT_STREAM + 16 * stage_index(Stage::Bn));
        let params = DnnParams::random(&widths, &mut rng)?;
        let config = DnnTrainConfig {
            schedule: NewbobConfig {
                initial_lr: self.config.bn_learning_rate,
                halving_threshold: self.config.halving_threshold,
                stop_threshold: self.config.stop_threshold,
                min_epochs: self.config.bn_min_epochs,
            },
            batch_size: self.config.bn_batch,
            max_epochs: self.config.bn_max_epochs,
            seed: Rng::with_stream(self.config.seed, SHUFFLE_STREAM + 16 * stage_index(Stage::Bn)).next_u64(),
        };
        let (params, reports) = train_cross_entropy(params, &train_set, &cv_set, &config)?;
        self.save_bottleneck(&params)?;
        self.write_log(Stage::Bn, &reports)?;
        self.extract_bn()?;
        Ok(reports)
    }

    /// Writes raw bottleneck activations for every utterance of every split.
    pub fn extract_bn(&self) -> Result<usize> {
        let params = self.load_bottleneck()?;
        let mut count = 0;
        for split in Split::ALL {
            for u in self.load_split(split)? {
                write_feat(&self.bnfeat_path(&u.record.id), &extract_bottleneck(&params, &self.spliced_video(&u))?)?;
                count += 1;
            }
        }
        Ok(count)
    }

    /// Frame labels written by the bn stage.
    pub fn frame_labels(&self, id: &str) -> Result<FrameLabelSequence> {
        let path = self.label_path(id);
        self.require("bn", &path)?;
        Ok(FrameLabelSequence::new(read_flab(&path)?))
    }

    pub fn train_lip(&self) -> Result<Vec<EpochReport>> {
        self.require_stage(Stage::Bn)?;
        let (train, cv) = self.lip_examples(self.config.lip_input)?;
        let model = self.initial_model(Stage::Lip, train[0].features.dim())?;
        let (model, reports) = train_ctc_stage(model, &train, &cv, &self.train_config(Stage::Lip))?;
        self.save_network(Stage::Lip, &model)?;
        self.write_log(Stage::Lip, &reports)?;
        Ok(reports)
    }

    pub fn train_fusion(&self) -> Result<Vec<EpochReport>> {
        self.require_stage(Stage::Bn)?;
        let train_utts = self.load_split(Split::Train)?;
        let train = self.ctc_examples(&train_utts, |u| self.fusion_input(u))?;
        let cv = self.ctc_examples(&self.load_split(Split::Cv)?, |u| self.fusion_input(u))?;
        let audio_dim = self.acoustic_input(&train_utts[0]).dim();
        let model = self.initial_model(Stage::Fusion, train[0].features.dim())?;
        let (model, reports) = train_fusion_stage(model, &train, &cv, audio_dim, &self.train_config(Stage::Fusion))?;
        self.save_network(Stage::Fusion, &model)?;
        self.write_log(Stage::Fusion, &reports)?;
        Ok(reports)
    }

    pub fn train(&self, stage: Stage) -> Result<Vec<EpochReport>> {
        match stage {
            Stage::Am => self.train_am(),
            Stage::Bn => self.train_bn(),
            Stage::Lip => self.train_lip(),
            Stage::Fusion => self.train_fusion(),
        }
    }

    /// Picks the decision-fusion bias on the cv split and writes
    /// `bias.txt`: the chosen value, then one `bias\tcer` line per grid point.
    pub fn tune_bias(&self) -> Result<(f64, Vec<(f64, f64)>)> {
        let am = self.load_network(Stage::Am)?;
        let lip = self.load_network(Stage::Lip)?;
        let priors = self.load_priors()?;
        let cv = self.load_split(Split::Cv)?;
        let mut items = Vec::new();
        for (i, u) in cv.iter().enumerate() {
            let video = posteriors(&lip, &self.lip_input(u, self.config.lip_input)?)?;
            let noise = self.babble(Split::Cv, i, u.audio.len())?;
            for &cond in &self.config.tune_conditions {
                items.push(FusionItem {
                    audio: posteriors(&am, &audio_features(&u.audio, &noise, cond)?)?,
                    video: video.clone(),
                    reference: u.label.clone(),
                });
            }
        }
        let (best, table) = tune_bias(&items, &priors, &self.config.bias_grid)?;
        let mut text = format!("{best}\n");
        for (b, c) in &table {
            text.push_str(&format!("{b}\t{c:.4}\n"));
        }
        write_file(&self.bias_path(), text.as_bytes())?;
        Ok((best, table))
    }

    /// The configured bias, else the tuned one from `bias.txt`, else a
    /// fresh tuning run.
    pub fn fusion_bias(&self) -> Result<f64> {
        if let Some(b) = self.config.fusion_bias {
            return Ok(b);
        }
        let path = self.bias_path();
        if path.exists() {
            let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            let first = text.lines().next().unwrap_or("");
            return first
                .trim()
                .parse()
                .map_err(|e| Error::format("bias", format!("{}: {e}", path.display())));
        }
        Ok(self.tune_bias()?.0)
    }

    fn eval_utterances(&self, split: Split) -> Result<Vec<EvalUtterance>> {
        self.load_split(split)?
            .into_iter()
            .enumerate()
            .map(|(i, u)| {
                Ok(EvalUtterance {
                    id: u.record.id.clone(),
                    lip_input: self.lip_input(&u, self.config.lip_input)?,
                    fusion_video: self.bottleneck_input(&u)?,
                    noise: self.babble(split, i, u.audio.len())?,
                    reference: u.label,
                    audio_static: u.audio,
                })
            })
            .collect()
    }

    /// Decodes the test split under every condition and writes
    /// `results.tsv` and `results.txt`.
    pub fn evaluate(&self) -> Result<ResultsTable> {
        let am = self.load_network(Stage::Am)?;
        let lip = self.load_network(Stage::Lip)?;
        let fusion = self.load_network(Stage::Fusion)?;
        let priors = self.load_priors()?;
        let fusion_config = FusionConfig::with_bias(self.fusion_bias()?);
        let models = Models {
            acoustic: &am,
            lip: &lip,
            fusion: &fusion,
            priors: &priors,
            fusion_config: &fusion_config,
            fill_value: self.config.fill_value,
        };
        let table = evaluate_conditions(&models, &self.eval_utterances(Split::Test)?, &self.config.snr_levels)?;
        write_file(&self.work_path("results.tsv"), table.to_tsv().as_bytes())?;
        write_file(&self.work_path("results.txt"), table.render().as_bytes())?;
        Ok(table)
    }

    /// Decode lines `id\thypothesis\tscore` for one model and condition.
    pub fn decode(&self, kind: FusionKind, split: Split, audio: AudioCondition, visual: bool) -> Result<Vec<String>> {
        let am = self.load_network(Stage::Am)?;
        let lip = self.load_network(Stage::Lip)?;
        let fusion = match kind {
            FusionKind::Feature => self.load_network(Stage::Fusion)?,
            FusionKind::Decision => am.clone(),
        };
        let priors = self.load_priors()?;
        let fusion_config = FusionConfig::with_bias(match (kind, audio, visual) {
            (FusionKind::Decision, AudioCondition::Clean | AudioCondition::Snr(_), true) => self.fusion_bias()?,
            _ => 0.0,
        });
        let models = Models {
            acoustic: &am,
            lip: &lip,
            fusion: &fusion,
            priors: &priors,
            fusion_config: &fusion_config,
            fill_value: self.config.fill_value,
        };
        let alphabet = Alphabet::default();
        self.eval_utterances(split)?
            .iter()
            .map(|u| {
                let res = best_path_decode(&condition_scores(&models, u, kind, audio, visual)?)?;
                Ok(format_decode_line(&u.id, &alphabet.decode(&res.hypothesis), res.score))
            })
            .collect()
    }
}
