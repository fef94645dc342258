//! Synthetic GRID-grammar corpus: six-slot sentences rendered into paired
//! audio-like and video-like feature streams.
//!
//! Each character is emitted for a random number of frames as its prototype
//! vector plus Gaussian jitter. The video stream only sees the character's
//! viseme class, so characters sharing a class are indistinguishable there.

use std::path::{Path, PathBuf};

use crate::ctc::Alphabet;
use crate::error::{Error, Result};
use crate::features::{mean_normalize, FeatureSequence};
use crate::formats::{write_feat, write_file, write_manifest, UtteranceRecord};
use crate::numerics::{Matrix, Rng};

pub const MIN_UTTERANCES: usize = 10;

/// Sentence template: command, color, preposition, letter, digit, adverb.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Grammar {
    pub slots: [Vec<String>; 6],
}

impl Default for Grammar {
    fn default() -> Self {
        let words = |s: &str| s.split_whitespace().map(str::to_string).collect::<Vec<_>>();
        let letters = ('A'..='Z').filter(|&c| c != 'W').map(String::from).collect();
        Grammar {
            slots: [
                words("BIN LAY PLACE SET"),
                words("BLUE GREEN RED WHITE"),
                words("AT BY IN WITH"),
                letters,
                words("ZERO ONE TWO THREE FOUR FIVE SIX SEVEN EIGHT NINE"),
                words("AGAIN NOW PLEASE SOON"),
            ],
        }
    }
}

impl Grammar {
    pub fn vocabulary_size(&self) -> usize {
        let mut all: Vec<&String> = self.slots.iter().flatten().collect();
        all.sort();
        all.dedup();
        all.len()
    }
}

/// One word per slot, uniformly, joined by single spaces.
pub fn sample_sentence(grammar: &Grammar, rng: &mut Rng) -> String {
    grammar
        .slots
        .iter()
        .map(|slot| slot[rng.below(slot.len())].as_str())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Viseme classes over the default alphabet (space first).
pub const DEFAULT_VISEMES: [&str; 10] = [" ", "BPM", "FV", "TDNL", "SZXC", "KGQ", "JHRY", "AEI", "OU", "W"];

#[derive(Clone, Debug, PartialEq)]
pub struct ProfileConfig {
    pub audio_dim: usize,
    pub video_dim: usize,
    pub min_duration: usize,
    pub max_duration: usize,
    pub audio_jitter: f64,
    pub video_jitter: f64,
}

impl Default for ProfileConfig {
    fn default() -> Self {
        ProfileConfig {
            audio_dim: 8,
            video_dim: 6,
            min_duration: 2,
            max_duration: 5,
            audio_jitter: 0.35,
            video_jitter: 0.5,
        }
    }
}

impl ProfileConfig {
    pub fn validate(&self) -> Result<()> {
        if self.audio_dim == 0 || self.video_dim == 0 {
            return Err(Error::Config("stream dimensions must be positive".into()));
        }
        if self.min_duration == 0 || self.min_duration > self.max_duration {
            return Err(Error::Config(format!(
                "invalid duration range [{}, {}]",
                self.min_duration, self.max_duration
            )));
        }
        if !(self.audio_jitter >= 0.0 && self.video_jitter >= 0.0) {
            return Err(Error::Config("jitter must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderProfile {
    pub alphabet: Alphabet,
    /// one row per symbol of the alphabet (label index − 1)
    pub audio_prototypes: Matrix,
    /// one row per viseme class
    pub video_prototypes: Matrix,
    /// viseme class of each symbol (label index − 1)
    pub viseme_of: Vec<usize>,
    pub min_duration: usize,
    pub max_duration: usize,
    pub audio_jitter: f64,
    pub video_jitter: f64,
}

impl RenderProfile {
    /// Standard-normal prototypes drawn from `rng`.
    pub fn generate(config: &ProfileConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let alphabet = Alphabet::default();
        let n = alphabet.symbols().len();
        let mut viseme_of = vec![usize::MAX; n];
        for (class, members) in DEFAULT_VISEMES.iter().enumerate() {
            for c in members.chars() {
                viseme_of[alphabet.index_of(c)? - 1] = class;
            }
        }
        debug_assert!(viseme_of.iter().all(|&v| v != usize::MAX));
        let mut normal = |rows: usize, cols: usize| {
            let data = (0..rows * cols).map(|_| rng.normal()).collect();
            Matrix::from_vec(rows, cols, data).expect("shape")
        };
        let audio_prototypes = normal(n, config.audio_dim);
        let video_prototypes = normal(DEFAULT_VISEMES.len(), config.video_dim);
        Ok(RenderProfile {
            alphabet,
            audio_prototypes,
            video_prototypes,
            viseme_of,
            min_duration: config.min_duration,
            max_duration: config.max_duration,
            audio_jitter: config.audio_jitter,
            video_jitter: config.video_jitter,
        })
    }

    pub fn audio_dim(&self) -> usize {
        self.audio_prototypes.cols()
    }

    pub fn video_dim(&self) -> usize {
        self.video_prototypes.cols()
    }
}

/// Renders a transcript into `(audio, video)` streams of equal length.
pub fn render_utterance(
    transcript: &str,
    profile: &RenderProfile,
    rng: &mut Rng,
) -> Result<(FeatureSequence, FeatureSequence)> {
    let labels = profile.alphabet.encode(transcript)?;
    if labels.is_empty() {
        return Err(Error::Empty("transcript"));
    }
    let (da, dv) = (profile.audio_dim(), profile.video_dim());
    let mut audio = Vec::new();
    let mut video = Vec::new();
    for &k in labels.as_slice() {
        let sym = k - 1;
        let frames = rng.int_inclusive(profile.min_duration, profile.max_duration);
        let (pa, pv) = (
            profile.audio_prototypes.row(sym),
            profile.video_prototypes.row(profile.viseme_of[sym]),
        );
        for _ in 0..frames {
            audio.extend(pa.iter().map(|&x| x + profile.audio_jitter * rng.normal()));
            video.extend(pv.iter().map(|&x| x + profile.video_jitter * rng.normal()));
        }
    }
    let len = audio.len() / da;
    Ok((
        FeatureSequence::new(Matrix::from_vec(len, da, audio)?)?,
        FeatureSequence::new(Matrix::from_vec(len, dv, video)?)?,
    ))
}

/// Babble: the sum of `talkers` independent mean-normalized audio streams,
/// each a run of random sentences cut to `len` frames.
pub fn render_babble(
    grammar: &Grammar,
    profile: &RenderProfile,
    len: usize,
    talkers: usize,
    rng: &mut Rng,
) -> Result<FeatureSequence> {
    if len == 0 || talkers == 0 {
        return Err(Error::InvalidArgument("babble needs at least one frame and one talker".into()));
    }
    let dim = profile.audio_dim();
    let mut sum = Matrix::zeros(len, dim);
    for _ in 0..talkers {
        let mut data: Vec<f64> = Vec::with_capacity((len + 200) * dim);
        while data.len() < len * dim {
            let (audio, _) = render_utterance(&sample_sentence(grammar, rng), profile, rng)?;
            data.extend_from_slice(audio.frames().as_slice());
        }
        data.truncate(len * dim);
        let talker = mean_normalize(&FeatureSequence::new(Matrix::from_vec(len, dim, data)?)?);
        sum.add_scaled(talker.frames(), 1.0)?;
    }
    FeatureSequence::new(sum)
}

/// Split sizes `(train, cv, test)`: a tenth held out for test, then a
/// tenth of the remainder for cross-validation.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let test = n / 10;
    let cv = (n - test) / 10;
    (n - test - cv, cv, test)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSpec {
    pub utterances: usize,
    pub seed: u64,
    pub profile: ProfileConfig,
}

impl CorpusSpec {
    /// `key = value` lines describing the corpus; read back by
    /// [`CorpusSpec::parse`].
    pub fn to_config_text(&self) -> String {
        let p = &self.profile;
        format!(
            "utterances = {}\nseed = {}\naudio_dim = {}\nvideo_dim = {}\nmin_duration = {}\nmax_duration = {}\naudio_jitter = {}\nvideo_jitter = {}\n",
            self.utterances, self.seed, p.audio_dim, p.video_dim, p.min_duration, p.max_duration, p.audio_jitter, p.video_jitter
        )
    }

    pub fn parse(text: &str) -> Result<Self> {
        let map = crate::config::parse_key_values(text)?;
        let get = |k: &str| {
            map.get(k)
                .ok_or_else(|| Error::Config(format!("corpus description lacks `{k}`")))
        };
        let num = |k: &str| -> Result<usize> {
            get(k)?.parse().map_err(|e| Error::Config(format!("{k}: {e}")))
        };
        let real = |k: &str| -> Result<f64> {
            get(k)?.parse().map_err(|e| Error::Config(format!("{k}: {e}")))
        };
        if let Some(k) = map.keys().find(|k| !CORPUS_KEYS.contains(&k.as_str())) {
            return Err(Error::Config(format!("unknown corpus key `{k}`")));
        }
        Ok(CorpusSpec {
            utterances: num("utterances")?,
            seed: get("seed")?.parse().map_err(|e| Error::Config(format!("seed: {e}")))?,
            profile: ProfileConfig {
                audio_dim: num("audio_dim")?,
                video_dim: num("video_dim")?,
                min_duration: num("min_duration")?,
                max_duration: num("max_duration")?,
                audio_jitter: real("audio_jitter")?,
                video_jitter: real("video_jitter")?,
            },
        })
    }

    /// The render profile is a pure function of the seed.
    pub fn render_profile(&self) -> Result<RenderProfile> {
        RenderProfile::generate(&self.profile, &mut Rng::with_stream(self.seed, PROFILE_STREAM))
    }
}

const CORPUS_KEYS: [&str; 8] = [
    "utterances",
    "seed",
    "audio_dim",
    "video_dim",
    "min_duration",
    "max_duration",
    "audio_jitter",
    "video_jitter",
];

/// RNG stream reserved for the render profile; utterance `i` uses stream `i`.
pub const PROFILE_STREAM: u64 = u64::MAX;
pub const CORPUS_DESCRIPTION: &str = "corpus.cfg";

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusManifests {
    pub train: Vec<UtteranceRecord>,
    pub cv: Vec<UtteranceRecord>,
    pub test: Vec<UtteranceRecord>,
}

impl CorpusManifests {
    pub fn paths(out_dir: &Path) -> [PathBuf; 3] {
        ["train.tsv", "cv.tsv", "test.tsv"].map(|f| out_dir.join(f))
    }
}

/// Writes `feats/<id>.{audio,video}.feat`, `train.tsv`, `cv.tsv`,
/// `test.tsv` and `corpus.cfg` under `out_dir`. Manifest paths are relative
/// to `out_dir`.
pub fn generate_corpus(spec: &CorpusSpec, grammar: &Grammar, out_dir: &Path) -> Result<CorpusManifests> {
    if spec.utterances < MIN_UTTERANCES {
        return Err(Error::InvalidArgument(format!(
            "corpus needs at least {MIN_UTTERANCES} utterances, got {}",
            spec.utterances
        )));
    }
    let profile = spec.render_profile()?;
    let mut records = Vec::with_capacity(spec.utterances);
    for i in 0..spec.utterances {
        let mut rng = Rng::with_stream(spec.seed, i as u64);
        let transcript = sample_sentence(grammar, &mut rng);
        let (audio, video) = render_utterance(&transcript, &profile, &mut rng)?;
        let id = format!("utt{i:05}");
        let audio_path = PathBuf::from("feats").join(format!("{id}.audio.feat"));
        let video_path = PathBuf::from("feats").join(format!("{id}.video.feat"));
        write_feat(&out_dir.join(&audio_path), &audio)?;
        write_feat(&out_dir.join(&video_path), &video)?;
        records.push(UtteranceRecord {
            id,
            audio_path,
            video_path,
            transcript,
        });
    }
    let (n_train, n_cv, _) = split_sizes(spec.utterances);
    let test = records.split_off(n_train + n_cv);
    let cv = records.split_off(n_train);
    let manifests = CorpusManifests { train: records, cv, test };
    let [train_path, cv_path, test_path] = CorpusManifests::paths(out_dir);
    write_manifest(&train_path, &manifests.train)?;
    write_manifest(&cv_path, &manifests.cv)?;
    write_manifest(&test_path, &manifests.test)?;
    write_file(&out_dir.join(CORPUS_DESCRIPTION), spec.to_config_text().as_bytes())?;
    Ok(manifests)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn profile(jitter: f64, duration: usize) -> RenderProfile {
        let config = ProfileConfig {
            min_duration: duration,
            max_duration: duration,
            audio_jitter: jitter,
            video_jitter: jitter,
            ..ProfileConfig::default()
        };
        RenderProfile::generate(&config, &mut Rng::new(3)).unwrap()
    }

    #[test]
    fn grammar_shape() {
        let g = Grammar::default();
        assert_eq!(g.vocabulary_size(), 51);
        assert_eq!(g.slots.map(|s| s.len()), [4, 4, 4, 25, 10, 4]);
    }

    #[test]
    fn sentences_have_six_words() {
        let g = Grammar::default();
        let mut rng = Rng::new(1);
        for _ in 0..200 {
            let s = sample_sentence(&g, &mut rng);
            assert_eq!(s.split(' ').count(), 6, "{s}");
            assert_eq!(s, s.to_uppercase());
        }
        assert_eq!(sample_sentence(&g, &mut Rng::new(9)), sample_sentence(&g, &mut Rng::new(9)));
    }

    #[test]
    fn command_words_uniform() {
        let g = Grammar::default();
        let mut rng = Rng::new(2);
        let mut counts = [0usize; 4];
        for _ in 0..10_000 {
            let s = sample_sentence(&g, &mut rng);
            let first = s.split(' ').next().unwrap();
            counts[g.slots[0].iter().position(|w| w == first).unwrap()] += 1;
        }
        for c in counts {
            assert!((c as f64 / 10_000.0 - 0.25).abs() < 0.02, "{counts:?}");
        }
    }

    #[test]
    fn noiseless_unit_duration_is_prototype_concatenation() {
        let p = profile(0.0, 1);
        let (audio, video) = render_utterance("AM X", &p, &mut Rng::new(4)).unwrap();
        assert_eq!(audio.len(), 4);
        assert_eq!(video.len(), 4);
        for (t, c) in "AM X".chars().enumerate() {
            let sym = p.alphabet.index_of(c).unwrap() - 1;
            assert_eq!(audio.frame(t), p.audio_prototypes.row(sym));
        }
    }

    #[test]
    fn shared_viseme_renders_identical_video() {
        let p = profile(0.0, 3);
        let (_, v1) = render_utterance("BAT", &p, &mut Rng::new(5)).unwrap();
        let (_, v2) = render_utterance("PEN", &p, &mut Rng::new(5)).unwrap();
        assert_eq!(v1, v2);
        let (a1, _) = render_utterance("BAT", &p, &mut Rng::new(5)).unwrap();
        let (a2, _) = render_utterance("PEN", &p, &mut Rng::new(5)).unwrap();
        assert_ne!(a1, a2);
    }

    #[test]
    fn streams_have_equal_length() {
        let p = RenderProfile::generate(&ProfileConfig::default(), &mut Rng::new(6)).unwrap();
        let g = Grammar::default();
        let mut rng = Rng::new(7);
        for _ in 0..50 {
            let s = sample_sentence(&g, &mut rng);
            let (a, v) = render_utterance(&s, &p, &mut rng).unwrap();
            assert_eq!(a.len(), v.len());
            assert!(a.len() >= 2 * s.len() && a.len() <= 5 * s.len());
        }
        assert!(render_utterance("", &p, &mut rng).is_err());
        assert!(render_utterance("a", &p, &mut rng).is_err());
    }

    #[test]
    fn length_grows_with_characters() {
        let p = profile(0.3, 3);
        let mut last = 0;
        for n in 1..8 {
            let (a, _) = render_utterance(&"A".repeat(n), &p, &mut Rng::new(8)).unwrap();
            assert!(a.len() > last);
            last = a.len();
        }
    }

    #[test]
    fn split_arithmetic() {
        assert_eq!(split_sizes(100), (81, 9, 10));
        assert_eq!(split_sizes(500), (405, 45, 50));
    }

    #[test]
    fn babble_has_requested_length() {
        let p = RenderProfile::generate(&ProfileConfig::default(), &mut Rng::new(6)).unwrap();
        let b = render_babble(&Grammar::default(), &p, 300, 4, &mut Rng::new(1)).unwrap();
        assert_eq!((b.len(), b.dim()), (300, 8));
        assert!(b.power() > 0.0);
    }

    #[test]
    fn description_round_trip() {
        let spec = CorpusSpec {
            utterances: 123,
            seed: 42,
            profile: ProfileConfig::default(),
        };
        assert_eq!(CorpusSpec::parse(&spec.to_config_text()).unwrap(), spec);
        assert!(CorpusSpec::parse("utterances = 3\nbogus = 1\n").is_err());
    }
}
