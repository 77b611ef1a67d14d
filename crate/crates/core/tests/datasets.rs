use glamor_core::datamodel::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma) * (x - ma)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb) * (y - mb)).sum();
    cov / (va * vb).sqrt()
}

#[test]
fn same_brand_identities_correlate_more_than_different_brands() {
    let data = generate_synthetic(4, 5, 8, 7).unwrap();
    // Mean image per identity, so per-view pose noise averages out.
    let mut means: Vec<(u32, Vec<f64>)> = Vec::new();
    for id in 0..data.num_identities() as u32 {
        let idx = data.identity_indices(id);
        let mut acc = vec![0.0; data.samples()[idx[0]].image.data.len()];
        for &i in idx {
            acc.iter_mut().zip(&data.samples()[i].image.data).for_each(|(a, &v)| *a += v as f64);
        }
        means.push((data.samples()[idx[0]].brand_id.unwrap(), acc));
    }
    let (mut same, mut diff) = (Vec::new(), Vec::new());
    for i in 0..means.len() {
        for j in i + 1..means.len() {
            let r = pearson(&means[i].1, &means[j].1);
            if means[i].0 == means[j].0 {
                same.push(r)
            } else {
                diff.push(r)
            }
        }
    }
    let avg = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    assert!(avg(&same) > avg(&diff), "same-brand {} vs cross-brand {}", avg(&same), avg(&diff));
}

#[test]
fn pk_sampling_covers_every_train_identity() {
    let data = generate_synthetic(4, 5, 8, 7).unwrap();
    let mut seen = vec![0usize; data.num_train_identities()];
    for seed in 0..1000 {
        let batch = sample_pk_batch(&data, 4, 4, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        assert_eq!(batch.samples.len(), 16);
        for &i in &batch.samples {
            seen[data.samples()[i].identity_id as usize] += 1;
        }
        for t in batch.all_triplets() {
            let id = |p: usize| data.samples()[batch.samples[p]].identity_id;
            assert_eq!(id(t.anchor), id(t.positive));
            assert_ne!(id(t.anchor), id(t.negative));
        }
    }
    assert!(seen.iter().all(|&c| c > 0), "{seen:?}");
}

#[test]
fn erasing_overwrites_one_rectangle_within_the_area_range() {
    let data = generate_synthetic(1, 1, 4, 3).unwrap();
    let config = ErasingConfig { probability: 1.0, ..ErasingConfig::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..50 {
        let sample = &data.samples()[0];
        let out = random_erase(sample, &config, &mut rng);
        assert!(out.same_labels(sample));
        let (w, h) = (sample.image.width, sample.image.height);
        let (mut y0, mut y1, mut x0, mut x1, mut changed) = (h, 0, w, 0, 0);
        for y in 0..h {
            for x in 0..w {
                if out.image.pixel(y, x) != sample.image.pixel(y, x) {
                    changed += 1;
                    (y0, y1, x0, x1) = (y0.min(y), y1.max(y), x0.min(x), x1.max(x));
                }
            }
        }
        assert!(changed > 0);
        let bbox = (y1 - y0 + 1) * (x1 - x0 + 1);
        let frac = bbox as f64 / (w * h) as f64;
        assert!((0.02..=0.4).contains(&frac), "bounding box covers {frac}");
        // Random values almost never reproduce the original quantized pixel.
        assert!(changed as f64 >= 0.99 * bbox as f64);
    }
}

#[test]
fn color_shuffle_keeps_labels_and_pixel_multiset() {
    let data = generate_synthetic(2, 1, 1, 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for s in data.samples() {
        let out = color_shuffle(s, 0.0, &mut rng);
        assert!(out.same_labels(s));
        for (a, b) in out.image.data.chunks(3).zip(s.image.data.chunks(3)) {
            let (mut a, mut b) = (a.to_vec(), b.to_vec());
            a.sort_by(f32::total_cmp);
            b.sort_by(f32::total_cmp);
            assert_eq!(a, b);
        }
    }
}
