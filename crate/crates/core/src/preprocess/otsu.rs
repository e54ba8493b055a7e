use super::image::{GrayImage, Mask};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct OtsuResult {
    /// Pixels with intensity `<= threshold` are ink.
    pub threshold: u8,
    pub mask: Mask,
}

pub fn histogram(gray: &GrayImage) -> [u64; 256] {
    let mut hist = [0u64; 256];
    for &v in &gray.data {
        hist[v as usize] += 1;
    }
    hist
}

/// Between-class variance of splitting `hist` into `<= t` and `> t`,
/// or `None` when one side is empty.
pub fn between_class_variance(hist: &[u64; 256], t: u8) -> Option<f64> {
    let total: u64 = hist.iter().sum();
    let sum: f64 = hist.iter().enumerate().map(|(v, &c)| v as f64 * c as f64).sum();
    let (n0, s0) = hist[..=t as usize]
        .iter()
        .enumerate()
        .fold((0u64, 0.0f64), |(n, s), (v, &c)| (n + c, s + v as f64 * c as f64));
    let n1 = total - n0;
    if n0 == 0 || n1 == 0 {
        return None;
    }
    let n = total as f64;
    let num = n * s0 - n0 as f64 * sum;
    Some(num * num / (n0 as f64 * n1 as f64 * n * n))
}

/// Otsu's threshold over the 8-bit histogram. Ties resolve to the smallest
/// threshold.
pub fn otsu_threshold(gray: &GrayImage) -> Result<OtsuResult> {
    let hist = histogram(gray);
    let total = gray.data.len() as u64;
    let sum: f64 = hist.iter().enumerate().map(|(v, &c)| v as f64 * c as f64).sum();
    let n = total as f64;

    let mut best: Option<(u8, f64)> = None;
    let (mut n0, mut s0) = (0u64, 0.0f64);
    for t in 0..=255u8 {
        n0 += hist[t as usize];
        s0 += t as f64 * hist[t as usize] as f64;
        let n1 = total - n0;
        if n0 == 0 || n1 == 0 {
            continue;
        }
        let num = n * s0 - n0 as f64 * sum;
        let var = num * num / (n0 as f64 * n1 as f64 * n * n);
        if best.is_none_or(|(_, b)| var > b) {
            best = Some((t, var));
        }
    }
    let (threshold, _) =
        best.ok_or_else(|| Error::DegenerateInput("image has a single intensity level; no Otsu threshold".into()))?;
    let mask = Mask {
        height: gray.height,
        width: gray.width,
        data: gray.data.iter().map(|&v| v <= threshold).collect(),
    };
    Ok(OtsuResult { threshold, mask })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gray(data: Vec<u8>, width: usize) -> GrayImage {
        GrayImage {
            height: data.len() / width,
            width,
            data,
        }
    }

    #[test]
    fn bimodal_split_is_exact() {
        let data: Vec<u8> = (0..64).map(|i| if i % 2 == 0 { 0 } else { 255 }).collect();
        let g = gray(data.clone(), 8);
        let r = otsu_threshold(&g).unwrap();
        assert_eq!(r.threshold, 0);
        for (m, v) in r.mask.data.iter().zip(&data) {
            assert_eq!(*m, *v == 0);
        }
    }

    #[test]
    fn constant_image_is_degenerate() {
        let g = gray(vec![128; 16], 4);
        assert!(matches!(otsu_threshold(&g), Err(Error::DegenerateInput(_))));
    }

    // Brute force straight from the definition: class weights and means
    // computed from the pixel list for each of the 256 candidates.
    fn brute_force(data: &[u8]) -> u8 {
        let n = data.len() as f64;
        let mut best = (0u8, f64::NEG_INFINITY);
        for t in 0..=255u8 {
            let lo: Vec<f64> = data.iter().filter(|&&v| v <= t).map(|&v| v as f64).collect();
            let hi: Vec<f64> = data.iter().filter(|&&v| v > t).map(|&v| v as f64).collect();
            if lo.is_empty() || hi.is_empty() {
                continue;
            }
            let w0 = lo.len() as f64 / n;
            let w1 = hi.len() as f64 / n;
            let m0 = lo.iter().sum::<f64>() / lo.len() as f64;
            let m1 = hi.iter().sum::<f64>() / hi.len() as f64;
            let var = w0 * w1 * (m0 - m1).powi(2);
            if var > best.1 * (1.0 + 1e-12) {
                best = (t, var);
            }
        }
        best.0
    }

    #[test]
    fn three_level_histogram_matches_brute_force() {
        let mut data = vec![20u8; 300];
        data.extend(vec![110u8; 150]);
        data.extend(vec![240u8; 550]);
        let g = gray(data.clone(), 10);
        assert_eq!(otsu_threshold(&g).unwrap().threshold, brute_force(&data));
    }

    #[test]
    fn closed_form_variance_agrees_with_incremental() {
        let data: Vec<u8> = (0..500u32).map(|i| ((i * 37 + 11) % 251) as u8).collect();
        let g = gray(data, 20);
        let hist = histogram(&g);
        let t = otsu_threshold(&g).unwrap().threshold;
        let best = between_class_variance(&hist, t).unwrap();
        for c in 0..=255u8 {
            if let Some(v) = between_class_variance(&hist, c) {
                assert!(v <= best * (1.0 + 1e-12));
            }
        }
    }

    proptest::proptest! {
        #[test]
        fn random_images_match_brute_force(levels in proptest::collection::vec(0u8..=255, 2..6),
                                           weights in proptest::collection::vec(1usize..40, 6)) {
            let mut data = Vec::new();
            for (l, w) in levels.iter().zip(&weights) {
                data.extend(std::iter::repeat_n(*l, *w));
            }
            let g = gray(data.clone(), data.len());
            match otsu_threshold(&g) {
                Ok(r) => {
                    let hist = histogram(&g);
                    let got = between_class_variance(&hist, r.threshold).unwrap();
                    let want = between_class_variance(&hist, brute_force(&data)).unwrap();
                    proptest::prop_assert!((got - want).abs() <= 1e-9 * want.max(1.0));
                }
                Err(_) => proptest::prop_assert!(data.iter().all(|&v| v == data[0])),
            }
        }
    }
}
