use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::volume::{LabelVolume, MultiModalVolume};

/// `T` depth-consecutive slices of one case with their labels.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceSequence {
    pub case: usize,
    /// Depth index of the first slice.
    pub start: usize,
    /// `[T, M, H, W]`
    pub images: Tensor<f32>,
    /// `T*H*W` class ids in `[T, H, W]` order.
    pub labels: Vec<u8>,
}

impl SliceSequence {
    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn has_tumor(&self) -> bool {
        self.labels.iter().any(|&c| c > 0)
    }
}

/// Windows of `t` consecutive depths starting every `stride` slices; a
/// window never runs past the last slice.
pub fn extract_sequences(
    volume: &MultiModalVolume,
    labels: &LabelVolume,
    t: usize,
    stride: usize,
) -> Result<Vec<SliceSequence>> {
    let (d, h, w) = volume.dims();
    if labels.dims() != (d, h, w) {
        return Err(Error::shape(
            "extract_sequences",
            format!("volume {:?} vs labels {:?}", (d, h, w), labels.dims()),
        ));
    }
    if t == 0 || stride == 0 {
        return Err(Error::InvalidArgument(
            "sequence length and stride must be positive".into(),
        ));
    }
    if t > d {
        return Err(Error::InvalidArgument(format!(
            "sequence length {t} exceeds depth {d}"
        )));
    }
    let m = volume.modalities();
    let mut out = Vec::new();
    for start in (0..=d - t).step_by(stride) {
        let mut data = Vec::with_capacity(t * m * h * w);
        let mut lab = Vec::with_capacity(t * h * w);
        for z in start..start + t {
            for mi in 0..m {
                data.extend_from_slice(volume.slice(mi, z));
            }
            lab.extend_from_slice(labels.slice(z));
        }
        out.push(SliceSequence {
            case: 0,
            start,
            images: Tensor::new(&[t, m, h, w], data)?,
            labels: lab,
        });
    }
    Ok(out)
}

/// Training or evaluation cases, normalized, with their extracted sequences.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub volumes: Vec<MultiModalVolume>,
    pub labels: Vec<LabelVolume>,
    pub sequences: Vec<SliceSequence>,
}

impl Dataset {
    /// Z-scores each volume per modality, then extracts sequences.
    pub fn new(
        cases: Vec<(MultiModalVolume, LabelVolume)>,
        t: usize,
        stride: usize,
    ) -> Result<Self> {
        if cases.is_empty() {
            return Err(Error::InvalidArgument("dataset has no cases".into()));
        }
        let mut volumes = Vec::with_capacity(cases.len());
        let mut labels = Vec::with_capacity(cases.len());
        let mut sequences = Vec::new();
        for (i, (mut v, l)) in cases.into_iter().enumerate() {
            v.normalize();
            for mut s in extract_sequences(&v, &l, t, stride)? {
                s.case = i;
                sequences.push(s);
            }
            volumes.push(v);
            labels.push(l);
        }
        Ok(Self {
            volumes,
            labels,
            sequences,
        })
    }

    /// Images `[B, T, M, H, W]` and labels for the chosen sequences.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor<f32>, Vec<u8>)> {
        let first = indices
            .first()
            .ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
        let parts: Vec<&Tensor<f32>> = indices.iter().map(|&i| &self.sequences[i].images).collect();
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(self.sequences[*first].images.shape());
        let images = Tensor::concat0(&parts)?.reshape(&shape)?;
        let labels = indices
            .iter()
            .flat_map(|&i| self.sequences[i].labels.iter().copied())
            .collect();
        Ok((images, labels))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_case(d: usize) -> (MultiModalVolume, LabelVolume) {
        let mut rng = ChaCha8Rng::seed_from_u64(d as u64);
        let v = MultiModalVolume::new(Tensor::randn(&[4, d, 4, 5], 1.0, &mut rng)).unwrap();
        let l = LabelVolume::new((d, 4, 5), (0..d * 20).map(|i| (i % 5) as u8).collect()).unwrap();
        (v, l)
    }

    #[test]
    fn tiling_counts() {
        let (v, l) = random_case(6);
        let s = extract_sequences(&v, &l, 3, 3).unwrap();
        assert_eq!(s.iter().map(|x| x.start).collect::<Vec<_>>(), vec![0, 3]);
        assert_eq!(extract_sequences(&v, &l, 3, 1).unwrap().len(), 4);
        assert!(extract_sequences(&v, &l, 7, 1).is_err());
    }

    #[test]
    fn content_matches_direct_indexing() {
        let (v, l) = random_case(7);
        let (d, h, w) = (7, 4, 5);
        for s in extract_sequences(&v, &l, 3, 2).unwrap() {
            for t in 0..3 {
                let z = s.start + t;
                for m in 0..4 {
                    for p in 0..h * w {
                        let want = v.tensor().data()[((m * d) + z) * h * w + p];
                        assert_eq!(s.images[((t * 4) + m) * h * w + p], want);
                    }
                }
                for p in 0..h * w {
                    assert_eq!(s.labels[t * h * w + p], l.data()[z * h * w + p]);
                }
            }
            assert!(s.start + 3 <= d);
        }
    }

    #[test]
    fn batch_stacks_sequences() {
        let ds = Dataset::new(vec![random_case(6), random_case(5)], 3, 3).unwrap();
        assert_eq!(ds.sequences.len(), 3);
        assert_eq!(ds.sequences[2].case, 1);
        let (x, y) = ds.batch(&[2, 0]).unwrap();
        assert_eq!(x.shape(), &[2, 3, 4, 4, 5]);
        assert_eq!(
            &x.data()[..ds.sequences[2].images.len()],
            ds.sequences[2].images.data()
        );
        assert_eq!(&y[..60], &ds.sequences[2].labels[..]);
    }
}
