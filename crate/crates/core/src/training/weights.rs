use crate::error::{Error, Result};
use crate::volume::LabelVolume;

/// Median-frequency class weights, `alpha[c] = median_freq / freq[c]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassWeights {
    pub alpha: Vec<f64>,
    pub freq: Vec<f64>,
    pub median_freq: f64,
    /// Whether each class occurs anywhere in the corpus.
    pub present: Vec<bool>,
}

/// Per-image class counts accumulated into frequencies: `freq[c]` is the
/// number of pixels of class `c` divided by the total pixels of the images
/// where `c` occurs.
#[derive(Clone, Debug)]
pub struct FrequencyCounter {
    class_pixels: Vec<u64>,
    image_pixels: Vec<u64>,
    scratch: Vec<u64>,
}

impl FrequencyCounter {
    pub fn new(classes: usize) -> Self {
        Self {
            class_pixels: vec![0; classes],
            image_pixels: vec![0; classes],
            scratch: vec![0; classes],
        }
    }

    pub fn add_image(&mut self, labels: &[u8]) -> Result<()> {
        let k = self.class_pixels.len();
        self.scratch.fill(0);
        for &l in labels {
            let c = l as usize;
            if c >= k {
                return Err(Error::LabelOutOfRange {
                    label: c,
                    classes: k,
                });
            }
            self.scratch[c] += 1;
        }
        for c in 0..k {
            if self.scratch[c] > 0 {
                self.class_pixels[c] += self.scratch[c];
                self.image_pixels[c] += labels.len() as u64;
            }
        }
        Ok(())
    }

    pub fn finish(&self) -> Result<ClassWeights> {
        let present: Vec<bool> = self.class_pixels.iter().map(|&n| n > 0).collect();
        let freq: Vec<f64> = self
            .class_pixels
            .iter()
            .zip(&self.image_pixels)
            .map(|(&n, &d)| if d > 0 { n as f64 / d as f64 } else { 0.0 })
            .collect();
        let mut sorted: Vec<f64> = freq
            .iter()
            .zip(&present)
            .filter(|(_, &p)| p)
            .map(|(&f, _)| f)
            .collect();
        if sorted.is_empty() {
            return Err(Error::InvalidArgument("no labeled pixels".into()));
        }
        sorted.sort_by(f64::total_cmp);
        let mid = sorted.len() / 2;
        let median_freq = if sorted.len() % 2 == 1 {
            sorted[mid]
        } else {
            (sorted[mid - 1] + sorted[mid]) / 2.0
        };
        let alpha = freq
            .iter()
            .zip(&present)
            .map(|(&f, &p)| if p { median_freq / f } else { 0.0 })
            .collect();
        Ok(ClassWeights {
            alpha,
            freq,
            median_freq,
            present,
        })
    }
}

/// Weights over every depth slice of `volumes`.
pub fn compute_class_weights(volumes: &[LabelVolume], classes: usize) -> Result<ClassWeights> {
    let mut counter = FrequencyCounter::new(classes);
    for v in volumes {
        for z in 0..v.dims().0 {
            counter.add_image(v.slice(z))?;
        }
    }
    counter.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(counts: &[usize]) -> Vec<u8> {
        counts
            .iter()
            .enumerate()
            .flat_map(|(c, &n)| std::iter::repeat_n(c as u8, n))
            .collect()
    }

    #[test]
    fn worked_example() {
        // one image holding every class in proportion 0.7 / 0.2 / 0.1
        let mut fc = FrequencyCounter::new(3);
        fc.add_image(&image(&[7, 2, 1])).unwrap();
        let w = fc.finish().unwrap();
        assert!((w.median_freq - 0.2).abs() < 1e-15);
        let want = [0.2 / 0.7, 1.0, 2.0];
        for (a, b) in w.alpha.iter().zip(want) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn uniform_and_single_class() {
        let mut fc = FrequencyCounter::new(4);
        fc.add_image(&image(&[3, 3, 3, 3])).unwrap();
        assert!(fc
            .finish()
            .unwrap()
            .alpha
            .iter()
            .all(|&a| (a - 1.0).abs() < 1e-15));

        let mut fc = FrequencyCounter::new(3);
        fc.add_image(&image(&[0, 5, 0])).unwrap();
        let w = fc.finish().unwrap();
        assert_eq!(w.alpha, vec![0.0, 1.0, 0.0]);
        assert_eq!(w.present, vec![false, true, false]);
    }

    #[test]
    fn denominator_counts_only_images_with_the_class() {
        let mut fc = FrequencyCounter::new(2);
        fc.add_image(&image(&[4])).unwrap();
        fc.add_image(&image(&[3, 1])).unwrap();
        let w = fc.finish().unwrap();
        assert!((w.freq[0] - 7.0 / 8.0).abs() < 1e-15);
        assert!((w.freq[1] - 1.0 / 4.0).abs() < 1e-15);
        // even count: median is the mean of the two
        assert!((w.median_freq - (7.0 / 8.0 + 0.25) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn dominant_class_gets_lowest_weight() {
        let mut fc = FrequencyCounter::new(5);
        fc.add_image(&image(&[80, 10, 5, 3, 2])).unwrap();
        let w = fc.finish().unwrap();
        for a in 0..5 {
            for b in 0..5 {
                if w.freq[a] > w.freq[b] {
                    assert!(w.alpha[a] < w.alpha[b]);
                }
            }
        }
    }

    #[test]
    fn volumes_are_counted_per_slice() {
        let v = LabelVolume::new((2, 1, 2), vec![0, 0, 0, 1]).unwrap();
        let w = compute_class_weights(&[v], 2).unwrap();
        assert!((w.freq[0] - 0.75).abs() < 1e-15);
        assert!((w.freq[1] - 0.5).abs() < 1e-15);
        assert!(compute_class_weights(&[], 2).is_err());
    }
}
