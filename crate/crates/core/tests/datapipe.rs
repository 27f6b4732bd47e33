use std::collections::BTreeMap;

use skd::data::{gen_synthetic, split, Batch, Dataset, LogitCache, SynthSpec};
use skd::distill::TeacherSource;
use skd::nn::{ResNetConfig, ResNetVariant};
use skd::Error;

const GOLDEN_SKDT: &[u8] = include_bytes!("golden/tiny.skdt");
const GOLDEN_SKDL: &[u8] = include_bytes!("golden/tiny.skdl");

fn tiny() -> Dataset {
    Dataset::new(
        1,
        2,
        2,
        3,
        vec![0.0, 0.5, 1.0, -1.5, 0.25, -0.75, 2.0, 3.5],
        vec![2, 0],
    )
    .unwrap()
}

#[test]
fn golden_dataset_round_trips_byte_for_byte() {
    let d = Dataset::from_bytes(GOLDEN_SKDT).unwrap();
    assert_eq!(d, tiny());
    assert_eq!(d.to_bytes(), GOLDEN_SKDT);
}

#[test]
fn golden_cache_round_trips_byte_for_byte() {
    let c = LogitCache::from_bytes(GOLDEN_SKDL).unwrap();
    assert_eq!(c.len(), 2);
    assert_eq!(c.classes(), 3);
    assert_eq!(c.row(1).unwrap(), &[3.25, 0.0, -1.0]);
    assert_eq!(c.dataset_hash(), 0xd149_940a_a627_3325);
    c.check_against(&tiny()).unwrap();
    assert_eq!(c.to_bytes(), GOLDEN_SKDL);
}

#[test]
fn stale_cache_is_rejected() {
    let c = LogitCache::from_bytes(GOLDEN_SKDL).unwrap();
    let mut other = tiny().to_bytes();
    let last = other.len() - 3;
    other[last] ^= 0x40;
    let changed = Dataset::from_bytes(&other).unwrap();
    assert!(matches!(c.check_against(&changed), Err(Error::CacheMismatch(_))));
}

#[test]
fn truncated_or_foreign_files_are_rejected() {
    for cut in [0, 3, 5, 20, GOLDEN_SKDT.len() - 1] {
        assert!(Dataset::from_bytes(&GOLDEN_SKDT[..cut]).is_err(), "cut {cut}");
    }
    assert!(Dataset::from_bytes(GOLDEN_SKDL).is_err());
    assert!(LogitCache::from_bytes(GOLDEN_SKDT).is_err());
    let mut extra = GOLDEN_SKDL.to_vec();
    extra.push(0);
    assert!(LogitCache::from_bytes(&extra).is_err());
    let mut version = GOLDEN_SKDT.to_vec();
    version[4] = 9;
    assert!(Dataset::from_bytes(&version).is_err());
}

#[test]
fn synthetic_classes_are_separable_by_nearest_centroid() {
    let d = gen_synthetic(&SynthSpec::default(), 3).unwrap();
    assert_eq!(d.len(), 2000);
    assert_eq!(d.class_counts(), vec![200; 10]);
    let (train, test) = split(&d, 0.7, 3).unwrap();
    let len = d.sample_len();
    let mut centroids = vec![vec![0.0f64; len]; d.classes()];
    let mut counts = vec![0usize; d.classes()];
    for &i in train.indices() {
        let k = d.label(i);
        counts[k] += 1;
        for (c, &p) in centroids[k].iter_mut().zip(d.image(i)) {
            *c += p as f64;
        }
    }
    for (c, n) in centroids.iter_mut().zip(&counts) {
        c.iter_mut().for_each(|v| *v /= *n as f64);
    }
    let correct = test
        .indices()
        .iter()
        .filter(|&&i| {
            let dist = |c: &Vec<f64>| -> f64 { c.iter().zip(d.image(i)).map(|(a, &b)| (a - b as f64).powi(2)).sum() };
            let best = (0..d.classes())
                .min_by(|&a, &b| dist(&centroids[a]).total_cmp(&dist(&centroids[b])))
                .unwrap();
            best == d.label(i)
        })
        .count();
    let acc = correct as f64 / test.len() as f64;
    assert!(acc >= 0.99, "nearest-centroid accuracy {acc}");
}

#[test]
fn generation_is_seeded() {
    let spec = SynthSpec {
        per_class: 5,
        ..SynthSpec::default()
    };
    assert_eq!(gen_synthetic(&spec, 1).unwrap(), gen_synthetic(&spec, 1).unwrap());
    assert_ne!(gen_synthetic(&spec, 1).unwrap(), gen_synthetic(&spec, 2).unwrap());
}

#[test]
fn split_partitions_and_stratifies() {
    for (per_class, fraction, seed) in [(200, 0.7, 0), (7, 0.7, 1), (13, 0.3, 2), (3, 0.5, 3)] {
        let spec = SynthSpec {
            per_class,
            ..SynthSpec::default()
        };
        let d = gen_synthetic(&spec, seed).unwrap();
        let (train, test) = split(&d, fraction, seed).unwrap();
        let mut all: Vec<usize> = train.indices().iter().chain(test.indices()).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..d.len()).collect::<Vec<_>>());
        assert_eq!(train.len(), (fraction * d.len() as f64).round() as usize);
        let mut per: BTreeMap<usize, usize> = BTreeMap::new();
        for &i in train.indices() {
            *per.entry(d.label(i)).or_default() += 1;
        }
        let floor = (fraction * per_class as f64).floor() as usize;
        for k in 0..d.classes() {
            let n = per.get(&k).copied().unwrap_or(0);
            assert!(n == floor || n == floor + 1, "class {k}: {n} of {per_class}");
            assert!(n < per_class, "class {k} has no test sample");
        }
        let (again, _) = split(&d, fraction, seed).unwrap();
        assert_eq!(again.indices(), train.indices());
    }
    let d = gen_synthetic(&SynthSpec::default(), 0).unwrap();
    assert!(split(&d, 1.0, 0).is_err());
    assert!(split(&d, 0.0, 0).is_err());
}

#[test]
fn batches_cover_the_view_once() {
    let d = gen_synthetic(
        &SynthSpec {
            per_class: 7,
            ..SynthSpec::default()
        },
        0,
    )
    .unwrap();
    let (train, _) = split(&d, 0.7, 0).unwrap();
    let mut seen: Vec<usize> = Vec::new();
    let batches: Vec<Batch> = train.batches(8, true, 42).unwrap().collect();
    for b in &batches {
        assert!(b.len() <= 8);
        assert_eq!(b.images.shape(), [b.len(), 3, 8, 8]);
        for (j, &i) in b.indices.iter().enumerate() {
            assert_eq!(b.labels[j], d.label(i));
        }
        seen.extend(&b.indices);
    }
    let order = seen.clone();
    seen.sort_unstable();
    assert_eq!(seen, train.indices());
    let again: Vec<usize> = train.batches(8, true, 42).unwrap().flat_map(|b| b.indices).collect();
    assert_eq!(again, order);
    let other: Vec<usize> = train.batches(8, true, 43).unwrap().flat_map(|b| b.indices).collect();
    assert_ne!(other, order);
    let plain: Vec<usize> = train.batches(8, false, 0).unwrap().flat_map(|b| b.indices).collect();
    assert_eq!(plain, train.indices());
    assert!(train.batches(0, false, 0).is_err());
}

#[test]
fn cached_teacher_matches_in_process_teacher() {
    let d = gen_synthetic(
        &SynthSpec {
            per_class: 6,
            ..SynthSpec::default()
        },
        5,
    )
    .unwrap();
    let teacher = ResNetConfig {
        base_width: 4,
        ..ResNetConfig::new(ResNetVariant::ResNet8, 3, 10)
    }
    .build::<f32>(7)
    .unwrap();
    let cache = LogitCache::from_model(&teacher, &d, 16).unwrap();
    cache.check_against(&d).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.skdl");
    cache.write(&path).unwrap();
    let cache = LogitCache::read(&path, &d).unwrap();

    let live = TeacherSource::Model(teacher);
    let cached = TeacherSource::<f32>::Cache(cache);
    let (train, _) = split(&d, 0.7, 1).unwrap();
    for b in train.batches(5, true, 9).unwrap() {
        let a = live.logits(&b).unwrap();
        let c = cached.logits(&b).unwrap();
        assert_eq!(a.shape(), c.shape());
        for (x, y) in a.data().iter().zip(c.data()) {
            assert!((x - y).abs() < 1e-5, "{x} vs {y}");
        }
    }
}
