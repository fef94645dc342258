//! Feed-forward classifier with a narrow hidden layer whose activations
//! serve as compact visual features.

use crate::ctc::PosteriorGram;
use crate::error::{Error, Result};
use crate::features::FeatureSequence;
use crate::network::{posteriors, NetworkParams};
use crate::numerics::{argmax, sigmoid, softmax_in_place, Matrix, Rng};
use crate::schedule::{EpochReport, Newbob, NewbobConfig, Step};

/// Hidden widths used when none are configured: `[in, 64, 64, 8, 64, out]`.
pub const DEFAULT_HIDDEN: [usize; 4] = [64, 64, 8, 64];
pub const DEFAULT_BATCH: usize = 256;
pub const DEFAULT_LR: f64 = 0.008;

/// One dense layer, `y = W x + b` with `W` of shape `out × in`.
#[derive(Clone, Debug, PartialEq)]
pub struct Affine {
    pub w: Matrix,
    pub b: Matrix,
}

impl Affine {
    pub fn zeros(input: usize, output: usize) -> Self {
        Affine {
            w: Matrix::zeros(output, input),
            b: Matrix::zeros(output, 1),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.w.rows()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DnnParams {
    layers: Vec<Affine>,
    /// index of the hidden layer whose activations are extracted
    bottleneck: usize,
}

impl DnnParams {
    pub fn new(layers: Vec<Affine>, bottleneck: usize) -> Result<Self> {
        if layers.len() < 2 {
            return Err(Error::InvalidArgument("a bottleneck network needs at least two layers".into()));
        }
        if bottleneck + 1 >= layers.len() {
            return Err(Error::InvalidArgument(format!(
                "bottleneck index {bottleneck} is not a hidden layer of a {}-layer network",
                layers.len()
            )));
        }
        for pair in layers.windows(2) {
            if pair[1].input_dim() != pair[0].output_dim() {
                return Err(Error::DimensionMismatch {
                    context: "bottleneck layer chain",
                    expected: pair[0].output_dim(),
                    found: pair[1].input_dim(),
                });
            }
        }
        for l in &layers {
            if l.b.shape() != (l.output_dim(), 1) {
                return Err(Error::DimensionMismatch {
                    context: "bottleneck bias",
                    expected: l.output_dim(),
                    found: l.b.rows(),
                });
            }
        }
        Ok(DnnParams { layers, bottleneck })
    }

    /// Glorot-uniform weights, zero biases. The bottleneck is the narrowest
    /// hidden layer (the first one on ties).
    pub fn random(widths: &[usize], rng: &mut Rng) -> Result<Self> {
        if widths.len() < 3 || widths.contains(&0) {
            return Err(Error::InvalidArgument(format!("invalid layer widths {widths:?}")));
        }
        let hidden = &widths[1..widths.len() - 1];
        let bottleneck = (0..hidden.len()).min_by_key(|&i| hidden[i]).expect("non-empty");
        let layers = widths
            .windows(2)
            .map(|w| {
                let r = (6.0 / (w[0] + w[1]) as f64).sqrt();
                Affine {
                    w: Matrix::random_uniform(w[1], w[0], -r, r, rng),
                    b: Matrix::zeros(w[1], 1),
                }
            })
            .collect();
        Self::new(layers, bottleneck)
    }

    pub fn zeros_like(&self) -> Self {
        DnnParams {
            layers: self.layers.iter().map(|l| Affine::zeros(l.input_dim(), l.output_dim())).collect(),
            bottleneck: self.bottleneck,
        }
    }

    pub fn layers(&self) -> &[Affine] {
        &self.layers
    }

    pub fn widths(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(Affine::output_dim))
            .collect()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn classes(&self) -> usize {
        self.layers.last().expect("non-empty").output_dim()
    }

    pub fn bottleneck_index(&self) -> usize {
        self.bottleneck
    }

    pub fn bottleneck_dim(&self) -> usize {
        self.layers[self.bottleneck].output_dim()
    }

    pub fn blocks(&self) -> Vec<(String, &Matrix)> {
        let mut out = Vec::with_capacity(2 * self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("dnn{i}.w"), &l.w));
            out.push((format!("dnn{i}.b"), &l.b));
        }
        out
    }

    /// Blocks for a checkpoint, including a 1×1 block recording the
    /// bottleneck index.
    pub fn checkpoint_blocks(&self) -> (Matrix, Vec<(String, &Matrix)>) {
        let marker = Matrix::filled(1, 1, self.bottleneck as f64);
        (marker, self.blocks())
    }

    pub fn from_blocks(blocks: Vec<(String, Matrix)>) -> Result<Self> {
        let mut map: std::collections::BTreeMap<String, Matrix> = blocks.into_iter().collect();
        let marker = map
            .remove("dnn.bottleneck")
            .ok_or_else(|| Error::format("MODL", "missing block `dnn.bottleneck`"))?;
        if marker.shape() != (1, 1) || marker.get(0, 0) < 0.0 || marker.get(0, 0).fract() != 0.0 {
            return Err(Error::format("MODL", "malformed `dnn.bottleneck` block"));
        }
        let mut layers = Vec::new();
        while let Some(w) = map.remove(&format!("dnn{}.w", layers.len())) {
            let b = map
                .remove(&format!("dnn{}.b", layers.len()))
                .ok_or_else(|| Error::format("MODL", format!("missing block `dnn{}.b`", layers.len())))?;
            layers.push(Affine { w, b });
        }
        if let Some(extra) = map.keys().next() {
            return Err(Error::format("MODL", format!("unexpected block `{extra}`")));
        }
        Self::new(layers, marker.get(0, 0) as usize)
    }

    fn axpy(&mut self, other: &DnnParams, factor: f64) -> Result<()> {
        for (p, g) in self.layers.iter_mut().zip(&other.layers) {
            p.w.add_scaled(&g.w, factor)?;
            p.b.add_scaled(&g.b, factor)?;
        }
        Ok(())
    }

    pub fn squared_norm(&self) -> f64 {
        self.layers.iter().map(|l| l.w.sum_squares() + l.b.sum_squares()).sum()
    }
}

/// Activations of every layer for a batch of frames.
#[derive(Clone, Debug)]
pub struct DnnCache {
    /// `activations[0]` is the input; `activations[i + 1]` is the output of
    /// layer `i` (sigmoid for hidden layers, softmax for the last)
    activations: Vec<Matrix>,
}

impl DnnCache {
    pub fn posteriors(&self) -> &Matrix {
        self.activations.last().expect("non-empty")
    }
}

fn affine_rows(layer: &Affine, x: &Matrix) -> Matrix {
    let mut y = Matrix::zeros(x.rows(), layer.output_dim());
    for r in 0..x.rows() {
        let row = y.row_mut(r);
        row.copy_from_slice(layer.b.as_slice());
        layer.w.matvec_acc(x.row(r), row);
    }
    y
}

fn check_input(params: &DnnParams, cols: usize) -> Result<()> {
    if cols != params.input_dim() {
        return Err(Error::DimensionMismatch {
            context: "bottleneck network input",
            expected: params.input_dim(),
            found: cols,
        });
    }
    Ok(())
}

/// Forward pass over a batch (one frame per row), returning class
/// posteriors and the cache for [`dnn_backward`].
pub fn dnn_forward_batch(params: &DnnParams, inputs: &Matrix) -> Result<(Matrix, DnnCache)> {
    check_input(params, inputs.cols())?;
    let mut activations = Vec::with_capacity(params.layers.len() + 1);
    activations.push(inputs.clone());
    let last = params.layers.len() - 1;
    for (i, layer) in params.layers.iter().enumerate() {
        let mut y = affine_rows(layer, activations.last().expect("non-empty"));
        if i == last {
            for r in 0..y.rows() {
                softmax_in_place(y.row_mut(r))?;
            }
        } else {
            y.as_mut_slice().iter_mut().for_each(|v| *v = sigmoid(*v));
        }
        activations.push(y);
    }
    let post = activations.last().expect("non-empty").clone();
    Ok((post, DnnCache { activations }))
}

/// Posteriors for a single frame.
pub fn dnn_forward(params: &DnnParams, frame: &[f64]) -> Result<(Vec<f64>, DnnCache)> {
    let x = Matrix::from_vec(1, frame.len(), frame.to_vec())?;
    let (post, cache) = dnn_forward_batch(params, &x)?;
    Ok((post.into_vec(), cache))
}

/// Gradient of a loss given its gradient `d_logits` with respect to the
/// pre-softmax outputs, summed over the batch.
pub fn dnn_backward(params: &DnnParams, cache: &DnnCache, d_logits: &Matrix) -> Result<DnnParams> {
    let acts = &cache.activations;
    if acts.len() != params.layers.len() + 1 || acts[0].cols() != params.input_dim() {
        return Err(Error::StaleCache("cache does not belong to these parameters"));
    }
    if d_logits.shape() != (acts[0].rows(), params.classes()) {
        return Err(Error::DimensionMismatch {
            context: "bottleneck logit gradient",
            expected: acts[0].rows() * params.classes(),
            found: d_logits.rows() * d_logits.cols(),
        });
    }
    let mut grads = params.zeros_like();
    let mut delta = d_logits.clone();
    for i in (0..params.layers.len()).rev() {
        let layer = &params.layers[i];
        let x = &acts[i];
        let g = &mut grads.layers[i];
        let mut dx = Matrix::zeros(x.rows(), x.cols());
        for r in 0..x.rows() {
            let d = delta.row(r);
            g.w.add_outer(d, x.row(r));
            for (b, v) in g.b.as_mut_slice().iter_mut().zip(d) {
                *b += v;
            }
            if i > 0 {
                layer.w.matvec_t_acc(d, dx.row_mut(r));
            }
        }
        if i > 0 {
            // x is a sigmoid output
            for (d, &s) in dx.as_mut_slice().iter_mut().zip(x.as_slice()) {
                *d *= s * (1.0 - s);
            }
        }
        delta = dx;
    }
    Ok(grads)
}

/// Summed cross-entropy of a batch and its gradient with respect to the
/// pre-softmax outputs.
pub fn cross_entropy_gradient(posteriors: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    if labels.len() != posteriors.rows() {
        return Err(Error::DimensionMismatch {
            context: "cross-entropy labels",
            expected: posteriors.rows(),
            found: labels.len(),
        });
    }
    let mut grad = posteriors.clone();
    let mut loss = 0.0;
    for (r, &k) in labels.iter().enumerate() {
        if k >= posteriors.cols() {
            return Err(Error::InvalidArgument(format!("frame label {k} out of range")));
        }
        loss -= posteriors.get(r, k).max(1e-300).ln();
        grad.row_mut(r)[k] -= 1.0;
    }
    Ok((loss, grad))
}

/// Frame-level class labels, one per frame of the paired features.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrameLabelSequence(Vec<usize>);

impl FrameLabelSequence {
    pub fn new(labels: Vec<usize>) -> Self {
        FrameLabelSequence(labels)
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

    pub fn into_vec(self) -> Vec<usize> {
        self.0
    }
}

/// Per-frame argmax of a posteriorgram, ties to the lowest class.
pub fn frame_labels_from_posteriors(post: &PosteriorGram) -> FrameLabelSequence {
    FrameLabelSequence(post.matrix().row_iter().map(argmax).collect())
}

/// Frame labels for one utterance from the acoustic model's softmax.
pub fn generate_frame_labels(acoustic_model: &NetworkParams, audio: &FeatureSequence) -> Result<FrameLabelSequence> {
    Ok(frame_labels_from_posteriors(&posteriors(acoustic_model, audio)?))
}

/// Frames stacked row-wise with one label each.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameDataset {
    pub inputs: Matrix,
    pub labels: Vec<usize>,
}

impl FrameDataset {
    /// Stacks the frames of several utterances.
    pub fn from_utterances<'a, I>(items: I) -> Result<Self>
    where
        I: IntoIterator<Item = (&'a FeatureSequence, &'a FrameLabelSequence)>,
    {
        let mut data = Vec::new();
        let mut labels = Vec::new();
        let mut dim = None;
        for (feats, lab) in items {
            if feats.len() != lab.len() {
                return Err(Error::DimensionMismatch {
                    context: "frame labels vs features",
                    expected: feats.len(),
                    found: lab.len(),
                });
            }
            if *dim.get_or_insert(feats.dim()) != feats.dim() {
                return Err(Error::DimensionMismatch {
                    context: "frame dataset dimension",
                    expected: dim.unwrap_or_default(),
                    found: feats.dim(),
                });
            }
            data.extend_from_slice(feats.frames().as_slice());
            labels.extend_from_slice(lab.as_slice());
        }
        let dim = dim.ok_or(Error::Empty("frame dataset"))?;
        if labels.is_empty() {
            return Err(Error::Empty("frame dataset"));
        }
        Ok(FrameDataset {
            inputs: Matrix::from_vec(labels.len(), dim, data)?,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn gather(&self, idx: &[usize]) -> (Matrix, Vec<usize>) {
        let d = self.inputs.cols();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(self.inputs.row(i));
        }
        let x = Matrix::from_vec(idx.len(), d, data).expect("gathered rows");
        (x, idx.iter().map(|&i| self.labels[i]).collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DnnTrainConfig {
    pub schedule: NewbobConfig,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub seed: u64,
}

impl Default for DnnTrainConfig {
    fn default() -> Self {
        DnnTrainConfig {
            schedule: NewbobConfig {
                initial_lr: DEFAULT_LR,
                halving_threshold: 0.5,
                stop_threshold: 0.1,
                min_epochs: 0,
            },
            batch_size: DEFAULT_BATCH,
            max_epochs: 20,
            seed: 0,
        }
    }
}

/// Percentage of frames whose argmax posterior equals the label.
pub fn frame_accuracy(params: &DnnParams, data: &FrameDataset) -> Result<f64> {
    let mut correct = 0usize;
    let chunk = 1024;
    let idx: Vec<usize> = (0..data.len()).collect();
    for part in idx.chunks(chunk) {
        let (x, labels) = data.gather(part);
        let (post, _) = dnn_forward_batch(params, &x)?;
        correct += post.row_iter().zip(&labels).filter(|(row, &k)| argmax(row) == k).count();
    }
    Ok(100.0 * correct as f64 / data.len() as f64)
}

/// Mini-batch SGD on frame cross-entropy. Frames are reshuffled every
/// epoch; gradients are summed over each batch; the learning rate follows
/// the newbob rule on `cv` frame accuracy.
pub fn train_cross_entropy(
    mut params: DnnParams,
    train: &FrameDataset,
    cv: &FrameDataset,
    config: &DnnTrainConfig,
) -> Result<(DnnParams, Vec<EpochReport>)> {
    if train.is_empty() || cv.is_empty() {
        return Err(Error::Empty("bottleneck training data"));
    }
    if config.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let mut schedule = Newbob::new(config.schedule.clone(), frame_accuracy(&params, cv)?)?;
    let mut rng = Rng::new(config.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut reports = Vec::new();
    for epoch in 1..=config.max_epochs {
        let started = std::time::Instant::now();
        let lr = schedule.learning_rate();
        rng.shuffle(&mut order);
        let mut loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            let (x, labels) = train.gather(batch);
            let (post, cache) = dnn_forward_batch(&params, &x)?;
            let (l, d_logits) = cross_entropy_gradient(&post, &labels)?;
            loss += l;
            let grads = dnn_backward(&params, &cache, &d_logits)?;
            params.axpy(&grads, -lr)?;
        }
        if !params.squared_norm().is_finite() {
            return Err(Error::NonFinite("bottleneck parameters diverged"));
        }
        let acc = frame_accuracy(&params, cv)?;
        let report = EpochReport {
            epoch,
            loss: loss / train.len() as f64,
            cv_accuracy: acc,
            learning_rate: lr,
            seconds: started.elapsed().as_secs_f64(),
        };
        log::info!("bn epoch {report}");
        reports.push(report);
        if schedule.record(acc) == Step::Stop {
            break;
        }
    }
    Ok((params, reports))
}

/// Sigmoid activations of the bottleneck layer for every frame.
pub fn extract_bottleneck(params: &DnnParams, video: &FeatureSequence) -> Result<FeatureSequence> {
    check_input(params, video.dim())?;
    let mut x = video.frames().clone();
    for layer in &params.layers[..=params.bottleneck] {
        x = affine_rows(layer, &x);
        x.as_mut_slice().iter_mut().for_each(|v| *v = sigmoid(*v));
    }
    FeatureSequence::new(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(rng: &mut Rng) -> DnnParams {
        let mut p = DnnParams::random(&[5, 6, 3, 6, 4], rng).unwrap();
        // non-zero biases so their gradients are exercised
        for l in &mut p.layers {
            l.b = Matrix::random_uniform(l.output_dim(), 1, -0.5, 0.5, rng);
        }
        p
    }

    #[test]
    fn default_shape_and_bottleneck() {
        let mut rng = Rng::new(1);
        let p = DnnParams::random(&[66, 64, 64, 8, 64, 28], &mut rng).unwrap();
        assert_eq!(p.widths(), vec![66, 64, 64, 8, 64, 28]);
        assert_eq!(p.bottleneck_index(), 2);
        assert_eq!(p.bottleneck_dim(), 8);
        let video = FeatureSequence::new(Matrix::random_uniform(7, 66, -1.0, 1.0, &mut rng)).unwrap();
        let bn = extract_bottleneck(&p, &video).unwrap();
        assert_eq!((bn.len(), bn.dim()), (7, 8));
    }

    #[test]
    fn zero_weights_give_uniform_posteriors() {
        let p = DnnParams::random(&[4, 3, 2, 3, 5], &mut Rng::new(2)).unwrap().zeros_like();
        let (post, _) = dnn_forward(&p, &[1.0, -2.0, 0.5, 3.0]).unwrap();
        for v in post {
            assert!((v - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn posteriors_normalized() {
        let mut rng = Rng::new(3);
        let p = small(&mut rng);
        let x = Matrix::random_uniform(10, 5, -3.0, 3.0, &mut rng);
        let (post, _) = dnn_forward_batch(&p, &x).unwrap();
        for row in post.row_iter() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        assert!(dnn_forward(&p, &[0.0; 4]).is_err());
    }

    fn batch_loss(p: &DnnParams, x: &Matrix, labels: &[usize]) -> f64 {
        let (post, _) = dnn_forward_batch(p, x).unwrap();
        cross_entropy_gradient(&post, labels).unwrap().0
    }

    fn coord(q: &mut DnnParams, layer: usize, which: usize, i: usize) -> &mut f64 {
        let l = &mut q.layers[layer];
        let m = if which == 0 { &mut l.w } else { &mut l.b };
        &mut m.as_mut_slice()[i]
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = Rng::new(4);
        let p = small(&mut rng);
        let x = Matrix::random_uniform(6, 5, -2.0, 2.0, &mut rng);
        let labels: Vec<usize> = (0..6).map(|_| rng.below(4)).collect();
        let (post, cache) = dnn_forward_batch(&p, &x).unwrap();
        let (_, d) = cross_entropy_gradient(&post, &labels).unwrap();
        let g = dnn_backward(&p, &cache, &d).unwrap();
        let eps = 1e-5;
        let mut worst: f64 = 0.0;
        for l in 0..p.layers.len() {
            for which in 0..2 {
                let len = if which == 0 { p.layers[l].w.as_slice().len() } else { p.layers[l].b.as_slice().len() };
                for i in 0..len {
                    let mut plus = p.clone();
                    let mut minus = p.clone();
                    *coord(&mut plus, l, which, i) += eps;
                    *coord(&mut minus, l, which, i) -= eps;
                    let num = (batch_loss(&plus, &x, &labels) - batch_loss(&minus, &x, &labels)) / (2.0 * eps);
                    let ana = if which == 0 { g.layers[l].w.as_slice()[i] } else { g.layers[l].b.as_slice()[i] };
                    let scale = num.abs().max(ana.abs());
                    if scale > 1e-7 {
                        worst = worst.max((num - ana).abs() / scale);
                    }
                }
            }
        }
        assert!(worst < 1e-5, "max relative error {worst}");
    }

    #[test]
    fn frame_label_tie_break_and_one_hot() {
        let uniform = PosteriorGram::new(Matrix::filled(3, 4, 0.25)).unwrap();
        assert_eq!(frame_labels_from_posteriors(&uniform).as_slice(), &[0, 0, 0]);
        let mut m = Matrix::zeros(3, 4);
        for (t, k) in [2, 0, 3].into_iter().enumerate() {
            m.set(t, k, 1.0);
        }
        let one_hot = PosteriorGram::new(m).unwrap();
        assert_eq!(frame_labels_from_posteriors(&one_hot).as_slice(), &[2, 0, 3]);
    }

    fn separable(n: usize, rng: &mut Rng) -> FrameDataset {
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for _ in 0..n {
            let k = rng.below(2);
            let c = if k == 0 { -1.0 } else { 1.0 };
            data.push(c + 0.3 * rng.normal());
            data.push(-c + 0.3 * rng.normal());
            labels.push(k);
        }
        FrameDataset {
            inputs: Matrix::from_vec(n, 2, data).unwrap(),
            labels,
        }
    }

    #[test]
    fn separable_toy_loss_decreases() {
        let mut rng = Rng::new(5);
        let train = separable(512, &mut rng);
        let cv = separable(128, &mut rng);
        let p = DnnParams::random(&[2, 8, 2, 8, 2], &mut rng).unwrap();
        let config = DnnTrainConfig {
            schedule: NewbobConfig {
                initial_lr: 0.03,
                min_epochs: 5,
                ..DnnTrainConfig::default().schedule
            },
            batch_size: 32,
            max_epochs: 5,
            seed: 9,
        };
        let (trained, reports) = train_cross_entropy(p.clone(), &train, &cv, &config).unwrap();
        assert_eq!(reports.len(), 5);
        for w in reports.windows(2) {
            assert!(w[1].loss < w[0].loss, "{reports:?}");
        }
        assert!(reports[4].cv_accuracy > 95.0);
        let (again, _) = train_cross_entropy(p, &train, &cv, &config).unwrap();
        assert_eq!(trained, again);
    }

    #[test]
    fn extraction_is_framewise() {
        let mut rng = Rng::new(6);
        let p = small(&mut rng);
        let m = Matrix::random_uniform(5, 5, -1.0, 1.0, &mut rng);
        let seq = FeatureSequence::new(m.clone()).unwrap();
        let out = extract_bottleneck(&p, &seq).unwrap();
        let perm = [3, 0, 4, 1, 2];
        let rows: Vec<Vec<f64>> = perm.iter().map(|&i| m.row(i).to_vec()).collect();
        let permuted = extract_bottleneck(&p, &FeatureSequence::from_rows(&rows).unwrap()).unwrap();
        for (t, &i) in perm.iter().enumerate() {
            assert_eq!(permuted.frame(t), out.frame(i));
        }
    }

    #[test]
    fn checkpoint_blocks_round_trip() {
        let p = small(&mut Rng::new(7));
        let (marker, blocks) = p.checkpoint_blocks();
        let mut owned: Vec<(String, Matrix)> = blocks.into_iter().map(|(n, m)| (n, m.clone())).collect();
        owned.push(("dnn.bottleneck".into(), marker));
        assert_eq!(DnnParams::from_blocks(owned).unwrap(), p);
    }
}
