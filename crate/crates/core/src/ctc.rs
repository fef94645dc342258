//! Connectionist temporal classification: the collapse map, the exact
//! log-likelihood of a label sequence by forward-backward in log space, its
//! gradient with respect to the pre-softmax activations, and a brute-force
//! enumerator used as the reference for small instances.

use crate::error::{Error, Result};
use crate::numerics::{log_add, Matrix};

/// Output index reserved for the blank symbol.
pub const BLANK: usize = 0;

/// Upper bound on alignments that [`brute_force_log_likelihood`] will enumerate.
pub const BRUTE_FORCE_LIMIT: u128 = 10_000_000;

/// Character inventory: blank at index 0, then `A`–`Z`, then space.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Alphabet {
    symbols: Vec<char>,
}

impl Default for Alphabet {
    fn default() -> Self {
        let mut symbols: Vec<char> = ('A'..='Z').collect();
        symbols.push(' ');
        Alphabet { symbols }
    }
}

impl Alphabet {
    /// Number of output classes including blank.
    pub fn size(&self) -> usize {
        self.symbols.len() + 1
    }

    /// Non-blank symbols in index order (index `i + 1` for `symbols()[i]`).
    pub fn symbols(&self) -> &[char] {
        &self.symbols
    }

    pub fn index_of(&self, c: char) -> Result<usize> {
        self.symbols
            .iter()
            .position(|&s| s == c)
            .map(|i| i + 1)
            .ok_or(Error::UnknownSymbol(c))
    }

    pub fn symbol(&self, index: usize) -> Option<char> {
        match index {
            BLANK => None,
            i => self.symbols.get(i - 1).copied(),
        }
    }

    pub fn encode(&self, text: &str) -> Result<LabelSequence> {
        text.chars()
            .map(|c| self.index_of(c))
            .collect::<Result<Vec<_>>>()
            .map(LabelSequence)
    }

    pub fn decode(&self, labels: &LabelSequence) -> String {
        labels
            .0
            .iter()
            .map(|&i| self.symbol(i).unwrap_or('?'))
            .collect()
    }
}

/// Target symbol indices; never contains [`BLANK`].
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct LabelSequence(Vec<usize>);

impl LabelSequence {
    pub fn new(indices: Vec<usize>) -> Result<Self> {
        if indices.contains(&BLANK) {
            return Err(Error::InvalidArgument(
                "label sequences cannot contain the blank symbol".into(),
            ));
        }
        Ok(LabelSequence(indices))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    /// Minimum number of frames any alignment needs: one per label plus a
    /// separating blank between equal neighbours.
    pub fn min_frames(&self) -> usize {
        self.0.len() + self.0.windows(2).filter(|w| w[0] == w[1]).count()
    }
}

/// Row-stochastic `T × |L'|` matrix of per-frame class posteriors.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorGram(Matrix);

impl PosteriorGram {
    pub fn new(probs: Matrix) -> Result<Self> {
        for row in probs.row_iter() {
            if row.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
                return Err(Error::InvalidArgument(
                    "posteriors must be finite and non-negative".into(),
                ));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidArgument(format!(
                    "posterior row sums to {sum}"
                )));
            }
        }
        Ok(PosteriorGram(probs))
    }

    /// Row-wise softmax of activations.
    pub fn from_logits(logits: &Matrix) -> Result<Self> {
        let mut probs = logits.clone();
        for t in 0..probs.rows() {
            crate::numerics::softmax_in_place(probs.row_mut(t))?;
        }
        Ok(PosteriorGram(probs))
    }

    pub fn frames(&self) -> usize {
        self.0.rows()
    }

    pub fn classes(&self) -> usize {
        self.0.cols()
    }

    pub fn row(&self, t: usize) -> &[f64] {
        self.0.row(t)
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }
}

/// The many-to-one map from alignments to labels: merge adjacent repeats,
/// then drop blanks.
pub fn collapse(alignment: &[usize]) -> LabelSequence {
    let mut out = Vec::new();
    let mut prev = None;
    for &k in alignment {
        if Some(k) != prev && k != BLANK {
            out.push(k);
        }
        prev = Some(k);
    }
    LabelSequence(out)
}

/// Forward/backward variables kept from a likelihood computation so that
/// [`ctc_gradient`] need not redo them.
#[derive(Clone, Debug)]
pub struct CtcCache {
    label: LabelSequence,
    shape: (usize, usize),
    log_alpha: Matrix,
    log_beta: Matrix,
    log_prob: f64,
}

impl CtcCache {
    pub fn log_prob(&self) -> f64 {
        self.log_prob
    }
}

fn extended_labels(label: &LabelSequence) -> Vec<usize> {
    let mut ext = Vec::with_capacity(2 * label.len() + 1);
    ext.push(BLANK);
    for &l in label.as_slice() {
        ext.push(l);
        ext.push(BLANK);
    }
    ext
}

fn check_label(post: &PosteriorGram, label: &LabelSequence) -> Result<()> {
    if let Some(&bad) = label.as_slice().iter().find(|&&l| l >= post.classes()) {
        return Err(Error::DimensionMismatch {
            context: "label index vs posterior classes",
            expected: post.classes(),
            found: bad,
        });
    }
    if post.frames() == 0 {
        return Err(Error::Empty("posteriorgram"));
    }
    let required = label.min_frames();
    if post.frames() < required {
        return Err(Error::Infeasible {
            frames: post.frames(),
            label_len: label.len(),
            required,
        });
    }
    Ok(())
}

fn log_posteriors(post: &PosteriorGram) -> Matrix {
    let mut lp = post.matrix().clone();
    lp.as_mut_slice().iter_mut().for_each(|p| *p = p.ln());
    lp
}

/// Whether state `s` of the extended sequence may be entered from `s − 2`.
#[inline]
fn can_skip(ext: &[usize], s: usize) -> bool {
    s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2]
}

/// `log P(label | O)` summed over every alignment that collapses to `label`.
pub fn ctc_log_likelihood(post: &PosteriorGram, label: &LabelSequence) -> Result<(f64, CtcCache)> {
    check_label(post, label)?;
    let cache = forward_backward(&log_posteriors(post), label);
    Ok((cache.log_prob, cache))
}

/// Loss `−log P(label | O)` and its gradient taken straight from activations.
/// Works on log-softmax so that confidently wrong frames cannot underflow.
pub fn ctc_loss_from_logits(logits: &Matrix, label: &LabelSequence) -> Result<(f64, Matrix)> {
    let mut lp = Matrix::zeros(logits.rows(), logits.cols());
    for t in 0..logits.rows() {
        lp.row_mut(t)
            .copy_from_slice(&crate::numerics::log_softmax_row(logits.row(t))?);
    }
    let post = PosteriorGram(lp.clone());
    // check_label only looks at shapes, so the log matrix stands in for posteriors here
    check_label(&post, label)?;
    let cache = forward_backward(&lp, label);
    if !cache.log_prob.is_finite() {
        return Err(Error::NonFinite("CTC log-likelihood"));
    }
    let mut grad = lp;
    grad.as_mut_slice().iter_mut().for_each(|v| *v = v.exp());
    grad.add_scaled(&occupancy(&cache), -1.0)?;
    Ok((-cache.log_prob, grad))
}

fn forward_backward(lp: &Matrix, label: &LabelSequence) -> CtcCache {
    let ext = extended_labels(label);
    let n = ext.len();
    let frames = lp.rows();

    // log_alpha[t][s]: paths over frames 0..=t ending in state s, emissions included.
    let mut log_alpha = Matrix::filled(frames, n, f64::NEG_INFINITY);
    log_alpha.set(0, 0, lp.get(0, ext[0]));
    if n > 1 {
        log_alpha.set(0, 1, lp.get(0, ext[1]));
    }
    for t in 1..frames {
        for s in 0..n {
            let mut acc = log_alpha.get(t - 1, s);
            if s >= 1 {
                acc = log_add(acc, log_alpha.get(t - 1, s - 1));
            }
            if can_skip(&ext, s) {
                acc = log_add(acc, log_alpha.get(t - 1, s - 2));
            }
            log_alpha.set(t, s, acc + lp.get(t, ext[s]));
        }
    }

    // log_beta[t][s]: completions over frames t+1.. given state s at t, emissions excluded.
    let mut log_beta = Matrix::filled(frames, n, f64::NEG_INFINITY);
    log_beta.set(frames - 1, n - 1, 0.0);
    if n > 1 {
        log_beta.set(frames - 1, n - 2, 0.0);
    }
    for t in (0..frames - 1).rev() {
        for s in 0..n {
            let mut acc = log_beta.get(t + 1, s) + lp.get(t + 1, ext[s]);
            if s + 1 < n {
                acc = log_add(acc, log_beta.get(t + 1, s + 1) + lp.get(t + 1, ext[s + 1]));
            }
            if s + 2 < n && can_skip(&ext, s + 2) {
                acc = log_add(acc, log_beta.get(t + 1, s + 2) + lp.get(t + 1, ext[s + 2]));
            }
            log_beta.set(t, s, acc);
        }
    }

    let mut log_prob = log_alpha.get(frames - 1, n - 1);
    if n > 1 {
        log_prob = log_add(log_prob, log_alpha.get(frames - 1, n - 2));
    }
    CtcCache {
        label: label.clone(),
        shape: (frames, lp.cols()),
        log_alpha,
        log_beta,
        log_prob,
    }
}

/// Expected symbol occupancy per frame under the posterior over alignments;
/// every row sums to one.
pub fn occupancy(cache: &CtcCache) -> Matrix {
    let (frames, classes) = cache.shape;
    let ext = extended_labels(&cache.label);
    let mut occ = Matrix::zeros(frames, classes);
    for t in 0..frames {
        let mut acc = vec![f64::NEG_INFINITY; classes];
        for (s, &k) in ext.iter().enumerate() {
            let v = cache.log_alpha.get(t, s) + cache.log_beta.get(t, s);
            acc[k] = log_add(acc[k], v);
        }
        for (k, v) in acc.into_iter().enumerate() {
            occ.set(t, k, (v - cache.log_prob).exp());
        }
    }
    occ
}

/// Gradient of `−log P(label | O)` with respect to the softmax inputs:
/// `post[t][k] − occupancy[t][k]`.
pub fn ctc_gradient(post: &PosteriorGram, label: &LabelSequence, cache: &CtcCache) -> Result<Matrix> {
    if cache.shape != (post.frames(), post.classes()) {
        return Err(Error::StaleCache("posteriorgram shape differs"));
    }
    if &cache.label != label {
        return Err(Error::StaleCache("label differs"));
    }
    if !cache.log_prob.is_finite() {
        return Err(Error::NonFinite("CTC log-likelihood"));
    }
    let mut grad = post.matrix().clone();
    grad.add_scaled(&occupancy(cache), -1.0)?;
    Ok(grad)
}

/// Reference likelihood by enumerating all `|L'|^T` alignments. Infeasible
/// labels simply get probability zero (`−∞`).
pub fn brute_force_log_likelihood(post: &PosteriorGram, label: &LabelSequence) -> Result<f64> {
    let frames = post.frames();
    let classes = post.classes();
    let count = (classes as u128).checked_pow(frames as u32).unwrap_or(u128::MAX);
    if count > BRUTE_FORCE_LIMIT {
        return Err(Error::InstanceTooLarge {
            alignments: count,
            limit: BRUTE_FORCE_LIMIT,
        });
    }
    let mut total = 0.0;
    let mut path = vec![0usize; frames];
    'outer: loop {
        if collapse(&path) == *label {
            total += path
                .iter()
                .enumerate()
                .map(|(t, &k)| post.row(t)[k])
                .product::<f64>();
        }
        // odometer increment
        for t in (0..frames).rev() {
            path[t] += 1;
            if path[t] < classes {
                continue 'outer;
            }
            path[t] = 0;
        }
        break;
    }
    Ok(total.ln())
}

/// Most probable single alignment of `label` (Viterbi over the extended
/// sequence). Ties prefer staying in the current state.
pub fn best_alignment(post: &PosteriorGram, label: &LabelSequence) -> Result<Vec<usize>> {
    check_label(post, label)?;
    let ext = extended_labels(label);
    let n = ext.len();
    let frames = post.frames();
    let lp = log_posteriors(post);
    let mut score = Matrix::filled(frames, n, f64::NEG_INFINITY);
    let mut back = vec![0usize; frames * n];
    score.set(0, 0, lp.get(0, ext[0]));
    if n > 1 {
        score.set(0, 1, lp.get(0, ext[1]));
    }
    for t in 1..frames {
        for s in 0..n {
            let mut best = (score.get(t - 1, s), s);
            if s >= 1 && score.get(t - 1, s - 1) > best.0 {
                best = (score.get(t - 1, s - 1), s - 1);
            }
            if can_skip(&ext, s) && score.get(t - 1, s - 2) > best.0 {
                best = (score.get(t - 1, s - 2), s - 2);
            }
            score.set(t, s, best.0 + lp.get(t, ext[s]));
            back[t * n + s] = best.1;
        }
    }
    let mut s = n - 1;
    if n > 1 && score.get(frames - 1, n - 2) > score.get(frames - 1, n - 1) {
        s = n - 2;
    }
    let mut path = vec![0usize; frames];
    for t in (0..frames).rev() {
        path[t] = ext[s];
        if t > 0 {
            s = back[t * n + s];
        }
    }
    Ok(path)
}
