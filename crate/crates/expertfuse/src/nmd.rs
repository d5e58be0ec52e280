//! Neural mean discrepancy.
//!
//! The neural mean of an image under an expert is the concatenation of the
//! per-channel spatial means of both convolutional layers, taken after the
//! ReLU, in layer order with channel indices ascending. An expert's
//! reference mean is the arithmetic mean of the neural means of its own
//! (un-augmented) training images; the discrepancy vector of an input is
//! its neural mean minus that reference.

use crate::error::{Error, Result};
use crate::expert::Expert;
use crate::tensor::Tensor;

/// Neural mean of a single image.
pub fn neural_mean(expert: &Expert, image: &Tensor) -> Result<Vec<f64>> {
    let batch = expert.neural_means(&[image])?;
    Ok(batch.data)
}

/// Arithmetic mean of the neural means of `images`.
pub fn reference_mean(expert: &Expert, images: &[&Tensor]) -> Result<Vec<f64>> {
    if images.is_empty() {
        return Err(Error::InvalidData(
            "reference mean needs a non-empty training set".into(),
        ));
    }
    let p = expert.nmd_dim();
    let means = expert.neural_means(images)?;
    let mut acc = vec![0.0; p];
    for r in 0..images.len() {
        for j in 0..p {
            acc[j] += means.data[r * p + j];
        }
    }
    for v in &mut acc {
        *v /= images.len() as f64;
    }
    Ok(acc)
}

/// Compute and store the reference mean on the expert.
pub fn set_reference_mean(expert: &mut Expert, images: &[&Tensor]) -> Result<()> {
    let m = reference_mean(expert, images)?;
    expert.reference_mean = Some(m);
    Ok(())
}

/// Discrepancy vector `g = neural_mean(image) - reference`.
pub fn nmd_vector(expert: &Expert, image: &Tensor) -> Result<Vec<f64>> {
    let batch = nmd_vectors(expert, &[image])?;
    Ok(batch.data)
}

/// Discrepancy vectors for a batch, one row per image.
pub fn nmd_vectors(expert: &Expert, images: &[&Tensor]) -> Result<Tensor> {
    let reference = expert.reference_mean.as_ref().ok_or_else(|| {
        Error::MissingInput(format!(
            "expert {} has no reference neural mean",
            expert.id
        ))
    })?;
    let p = expert.nmd_dim();
    let mut means = expert.neural_means(images)?;
    for r in 0..images.len() {
        for j in 0..p {
            means.data[r * p + j] -= reference[j];
        }
    }
    Ok(means)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_scenario, ScenarioConfig, ShiftParams, SiteRole, SiteSpec};
    use crate::expert::{train_base, CONV_CHANNELS, NMD_DIM};
    use crate::nn::TrainConfig;

    fn fresh_expert() -> Expert {
        let config = ScenarioConfig {
            image_height: 16,
            image_width: 16,
            class_names: vec!["a".into(), "b".into()],
            sites: vec![SiteSpec {
                id: "s".into(),
                labels: vec![0, 1],
                patients: 6,
                samples_per_patient: 4,
                role: SiteRole::Base,
                shift: ShiftParams {
                    gain: 1.0,
                    bias: 0.0,
                    noise_sigma: 0.02,
                    max_translation: 1,
                    patient_sigma: 0.02,
                },
            }],
            split_ratios: [0.6, 0.2, 0.2],
            template_waves: 3,
        };
        let corpus = generate_scenario(&config, 17).unwrap();
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 8,
            lr: 1e-3,
            seed: 4,
        };
        train_base(corpus.base_site(), &cfg).unwrap()
    }

    #[test]
    fn zero_image_with_zero_biases_has_zero_mean() {
        // Freshly initialized networks carry zero biases.
        let config = ScenarioConfig {
            image_height: 16,
            image_width: 16,
            class_names: vec!["a".into()],
            sites: vec![SiteSpec {
                id: "s".into(),
                labels: vec![0],
                patients: 3,
                samples_per_patient: 1,
                role: SiteRole::Base,
                shift: ShiftParams {
                    gain: 1.0,
                    bias: 0.0,
                    noise_sigma: 0.0,
                    max_translation: 0,
                    patient_sigma: 0.0,
                },
            }],
            split_ratios: [0.4, 0.3, 0.3],
            template_waves: 1,
        };
        let corpus = generate_scenario(&config, 3).unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 4,
            lr: 0.0,
            seed: 9,
        };
        let expert = train_base(corpus.base_site(), &cfg).unwrap();
        let zero = Tensor::zeros(vec![1, 16, 16]);
        let m = neural_mean(&expert, &zero).unwrap();
        assert_eq!(m.len(), NMD_DIM);
        assert!(m.iter().all(|&v| v == 0.0), "{m:?}");
    }

    #[test]
    fn constant_image_all_ones_kernel_mean_is_nine_c() {
        let mut expert = fresh_expert();
        let (w, b) = expert.net.layer_params(0);
        let weight = expert.net.params.value_mut(w.unwrap());
        for v in &mut weight.data {
            *v = 1.0;
        }
        let bias = expert.net.params.value_mut(b.unwrap());
        for v in &mut bias.data {
            *v = 0.0;
        }
        let c = 0.07;
        let img = Tensor::new(vec![1, 16, 16], vec![c; 256]);
        let m = neural_mean(&expert, &img).unwrap();
        for ch in 0..CONV_CHANNELS[0] {
            assert!((m[ch] - 9.0 * c).abs() < 1e-12, "channel {ch}: {}", m[ch]);
        }
    }

    #[test]
    fn pixel_permutation_changes_neural_mean() {
        let expert = fresh_expert();
        let img = crate::data::class_template(99, 0, 16, 16, 3);
        let img = Tensor::new(
            img.shape.clone(),
            img.data.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        );
        let mut permuted = img.data.clone();
        permuted.reverse();
        let permuted = Tensor::new(img.shape.clone(), permuted);
        let a = neural_mean(&expert, &img).unwrap();
        let b = neural_mean(&expert, &permuted).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn reference_mean_of_one_image_is_its_neural_mean() {
        let expert = fresh_expert();
        let img = Tensor::new(vec![1, 16, 16], vec![0.3; 256]);
        let single = neural_mean(&expert, &img).unwrap();
        let reference = reference_mean(&expert, &[&img]).unwrap();
        assert_eq!(single, reference);
    }

    #[test]
    fn reference_mean_invariant_under_duplication() {
        let expert = fresh_expert();
        let a = Tensor::new(vec![1, 16, 16], vec![0.2; 256]);
        let b = Tensor::new(vec![1, 16, 16], vec![0.6; 256]);
        let once = reference_mean(&expert, &[&a, &b]).unwrap();
        let twice = reference_mean(&expert, &[&a, &b, &a, &b]).unwrap();
        for (x, y) in once.iter().zip(&twice) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn reference_mean_matches_second_pass_oracle() {
        let expert = fresh_expert();
        let images: Vec<Tensor> = (0..7)
            .map(|i| {
                let t = crate::data::class_template(50 + i, 0, 16, 16, 3);
                Tensor::new(
                    t.shape.clone(),
                    t.data.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
                )
            })
            .collect();
        let refs: Vec<&Tensor> = images.iter().collect();
        let fast = reference_mean(&expert, &refs).unwrap();
        // Independent accumulation: one image at a time.
        let mut oracle = vec![0.0; NMD_DIM];
        for img in &refs {
            let m = neural_mean(&expert, img).unwrap();
            for (acc, v) in oracle.iter_mut().zip(&m) {
                *acc += v;
            }
        }
        for v in &mut oracle {
            *v /= refs.len() as f64;
        }
        for (a, b) in fast.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn nmd_requires_reference_and_centers_training_set() {
        let mut expert = fresh_expert();
        let img = Tensor::new(vec![1, 16, 16], vec![0.4; 256]);
        assert!(nmd_vector(&expert, &img).is_err());

        let images: Vec<Tensor> = (0..5)
            .map(|i| Tensor::new(vec![1, 16, 16], vec![0.1 * (i + 1) as f64; 256]))
            .collect();
        let refs: Vec<&Tensor> = images.iter().collect();
        set_reference_mean(&mut expert, &refs).unwrap();

        // Mean of g over the training set vanishes by construction.
        let g = nmd_vectors(&expert, &refs).unwrap();
        for j in 0..NMD_DIM {
            let mean: f64 =
                (0..refs.len()).map(|r| g.data[r * NMD_DIM + j]).sum::<f64>() / refs.len() as f64;
            assert!(mean.abs() < 1e-9, "dim {j}: {mean}");
        }

        // An image whose neural mean equals the reference maps to zero.
        let reference = expert.reference_mean.clone().unwrap();
        let probe = &images[2];
        let m = neural_mean(&expert, probe).unwrap();
        let g2 = nmd_vector(&expert, probe).unwrap();
        for j in 0..NMD_DIM {
            assert!((g2[j] - (m[j] - reference[j])).abs() < 1e-12);
        }
    }
}
