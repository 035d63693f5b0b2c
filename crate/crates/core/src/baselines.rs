//! Hand-crafted listener baselines.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::corpus::ConversationClip;
use crate::error::{ElpError, Result};
use crate::latent::{embed_codewords, CodewordGrid};
use crate::motion::{BlinkSequence, MotionSequence};
use crate::network::AseModel;

/// Relative perturbation scale of the Random baseline.
pub const RANDOM_SIGMA_SCALE: f64 = 0.05;

/// Mean over frames of the Euclidean distance between aligned rows.
pub fn mean_frame_distance(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(ElpError::LengthMismatch {
            what: "frame distance shape",
            left: a.len(),
            right: b.len(),
        });
    }
    if a.nrows() == 0 {
        return Err(ElpError::TooShort {
            what: "frame distance",
            min: 1,
            found: 0,
        });
    }
    let total: f64 = a
        .rows()
        .into_iter()
        .zip(b.rows())
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt())
        .sum();
    Ok(total / a.nrows() as f64)
}

#[derive(PartialEq)]
struct Candidate {
    distance: f64,
    index: usize,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    // Max-heap on (distance, index): the root is the worst retained candidate.
    fn cmp(&self, other: &Self) -> Ordering {
        self.distance
            .total_cmp(&other.distance)
            .then(self.index.cmp(&other.index))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Indices of the `k` keys nearest to `query`, closest first; ties go to the
/// lower index.
pub fn nearest_k<'a>(
    query: ArrayView2<'_, f64>,
    keys: impl IntoIterator<Item = ArrayView2<'a, f64>>,
    k: usize,
) -> Result<Vec<usize>> {
    let mut heap = BinaryHeap::with_capacity(k + 1);
    let mut seen = 0;
    for (index, key) in keys.into_iter().enumerate() {
        seen += 1;
        let distance = mean_frame_distance(query, key)?;
        heap.push(Candidate { distance, index });
        if heap.len() > k {
            heap.pop();
        }
    }
    if seen == 0 {
        return Err(ElpError::invalid("nearest-neighbour baseline needs a nonempty training set"));
    }
    Ok(heap.into_sorted_vec().into_iter().map(|c| c.index).collect())
}

fn stacked_views(clips: &[ConversationClip], f: impl Fn(&ConversationClip) -> Array2<f64>) -> Vec<Array2<f64>> {
    clips.iter().map(f).collect()
}

/// Training clip whose speaker motion is nearest to `query`.
pub fn nn_motion(query: &MotionSequence, train: &[ConversationClip]) -> Result<usize> {
    let q = query.stacked();
    let keys = stacked_views(train, |c| c.speaker.stacked());
    Ok(nearest_k(q.view(), keys.iter().map(|k| k.view()), 1)?[0])
}

/// Training clip whose audio features are nearest to `query`.
pub fn nn_audio(query: ArrayView2<'_, f64>, train: &[ConversationClip]) -> Result<usize> {
    Ok(nearest_k(query, train.iter().map(|c| c.audio.feats()), 1)?[0])
}

/// Population std of every listener coefficient over all training frames.
fn listener_std(train: &[ConversationClip]) -> (Array1<f64>, Array1<f64>) {
    let std = |rows: Vec<ArrayView2<'_, f64>>| -> Array1<f64> {
        let all = ndarray::concatenate(Axis(0), &rows).expect("equal widths");
        all.std_axis(Axis(0), 0.0)
    };
    (
        std(train.iter().map(|c| c.listener.beta()).collect()),
        std(train.iter().map(|c| c.listener.pose()).collect()),
    )
}

/// Random baseline sampler with precomputed per-dimension scales.
#[derive(Debug, Clone)]
pub struct RandomBaseline<'a> {
    train: &'a [ConversationClip],
    sigma_beta: Array1<f64>,
    sigma_pose: Array1<f64>,
}

impl<'a> RandomBaseline<'a> {
    pub fn new(train: &'a [ConversationClip], scale: f64) -> Result<Self> {
        if train.is_empty() {
            return Err(ElpError::invalid("random baseline needs a nonempty training set"));
        }
        let (sb, sp) = listener_std(train);
        Ok(Self {
            train,
            sigma_beta: sb * scale,
            sigma_pose: sp * scale,
        })
    }

    /// A perturbed copy of a uniformly drawn training listener, and the
    /// drawn clip's index.
    pub fn sample(&self, rng: &mut impl Rng) -> Result<(MotionSequence, usize)> {
        let index = rng.random_range(0..self.train.len());
        let clip = &self.train[index];
        let perturb = |x: ArrayView2<'_, f64>, sigma: &Array1<f64>, rng: &mut dyn rand::RngCore| {
            let mut out = x.to_owned();
            for mut row in out.rows_mut() {
                for (v, s) in row.iter_mut().zip(sigma) {
                    let z: f64 = StandardNormal.sample(rng);
                    *v += s * z;
                }
            }
            out
        };
        let beta = perturb(clip.listener.beta(), &self.sigma_beta, rng);
        let pose = perturb(clip.listener.pose(), &self.sigma_pose, rng);
        Ok((MotionSequence::new(beta, pose, clip.listener.fps())?, index))
    }
}

/// Uniform codewords over the model's full code range.
pub fn random_codewords(model: &AseModel, frames: usize, rng: &mut impl Rng) -> Result<CodewordGrid> {
    let c = model.config();
    let max = c.code_width();
    let codes = Array2::from_shape_fn((frames, c.heads), |_| rng.random_range(1..=max));
    CodewordGrid::new(codes, max)
}

/// Decodes uniformly random codewords with the model's trained decoders.
pub fn dls_random(
    model: &AseModel,
    frames: usize,
    fps: f64,
    rng: &mut impl Rng,
) -> Result<(MotionSequence, BlinkSequence)> {
    let grid = random_codewords(model, frames, rng)?;
    let embedding = embed_codewords(&grid);
    let (beta, pose) = model.decode_motion(&embedding)?;
    let blink = model.decode_blink(&embedding)?;
    Ok((
        MotionSequence::new(beta, pose, fps)?,
        BlinkSequence::from_probabilities(&blink, 0.5),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_corpus, CorpusSpec};
    use crate::network::NetworkConfig;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn corpus() -> Vec<ConversationClip> {
        generate_corpus(&CorpusSpec {
            clips: 20,
            ..CorpusSpec::default()
        })
        .unwrap()
        .train
    }

    #[test]
    fn query_equal_to_training_speaker_returns_that_clip() {
        let train = corpus();
        for i in [0, 3, train.len() - 1] {
            assert_eq!(nn_motion(&train[i].speaker, &train).unwrap(), i);
            assert_eq!(nn_audio(train[i].audio.feats(), &train).unwrap(), i);
        }
    }

    #[test]
    fn closer_of_two_hand_built_keys_wins() {
        let q = array![[0.0, 0.0], [0.0, 0.0]];
        // Mean frame distances 1.0 and 0.5.
        let far = array![[1.0, 0.0], [0.0, 1.0]];
        let near = array![[0.0, 0.5], [0.5, 0.0]];
        assert_eq!(nearest_k(q.view(), [far.view(), near.view()], 1).unwrap(), vec![1]);
        assert_eq!(mean_frame_distance(q.view(), far.view()).unwrap(), 1.0);
    }

    #[test]
    fn heap_order_matches_linear_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let keys: Vec<Array2<f64>> = (0..40)
            .map(|_| Array2::from_shape_fn((5, 3), |_| rng.random_range(-1.0..1.0)))
            .collect();
        let q = Array2::from_shape_fn((5, 3), |_| rng.random_range(-1.0..1.0));
        let mut scan: Vec<(f64, usize)> = keys
            .iter()
            .enumerate()
            .map(|(i, k)| (mean_frame_distance(q.view(), k.view()).unwrap(), i))
            .collect();
        scan.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let expected: Vec<usize> = scan.iter().take(7).map(|p| p.1).collect();
        assert_eq!(nearest_k(q.view(), keys.iter().map(|k| k.view()), 7).unwrap(), expected);
    }

    #[test]
    fn empty_training_set_is_an_error() {
        let q = array![[0.0]];
        assert!(nearest_k(q.view(), std::iter::empty(), 1).is_err());
        assert!(RandomBaseline::new(&[], 0.05).is_err());
    }

    #[test]
    fn zero_scale_returns_a_training_clip_exactly() {
        let train = corpus();
        let sampler = RandomBaseline::new(&train, 0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (m, i) = sampler.sample(&mut rng).unwrap();
        assert_eq!(m, train[i].listener);
    }

    #[test]
    fn dls_codes_stay_in_range_and_reproduce() {
        let model = AseModel::new(NetworkConfig::reduced(), 3).unwrap();
        let max = model.config().code_width();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let grid = random_codewords(&model, 50, &mut rng).unwrap();
        assert!(grid.codes().iter().all(|&c| (1..=max).contains(&c)));
        let a = dls_random(&model, 12, 25.0, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = dls_random(&model, 12, 25.0, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }
}
