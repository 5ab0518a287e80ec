use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sigmine_core::eval::{run_query, QueryMember, QuerySet, RankedPrediction, Representation, SearchSpace};
use sigmine_core::mih::MihIndex;
use sigmine_core::trainer::{
    train, AugmentationConfig, EncoderModel, Layout, LossConfig, Patch, PatchSource, TrainConfig,
};
use sigmine_core::{hamming, Signature, SignatureRecord, VoxelCoord};

/// Records on a 20³ grid whose signatures drift slowly through space, so
/// that small Hamming distances are common.
fn clustered_records(seed: u64) -> Vec<SignatureRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let anchors: Vec<u64> = (0..8).map(|_| rng.random()).collect();
    let mut out = Vec::new();
    for z in 0..20u32 {
        for y in 0..20u32 {
            for x in 0..20u32 {
                let region = (x / 10 + 2 * (y / 10) + 4 * (z / 10)) as usize;
                let mut bits = anchors[region];
                for _ in 0..rng.random_range(0..5) {
                    bits ^= 1 << rng.random_range(0..64);
                }
                out.push(SignatureRecord::new(
                    VoxelCoord::new(x * 2, y * 2, z * 2),
                    Signature(bits),
                ));
            }
        }
    }
    out
}

/// Full scan, quadratic literal suppression and a plain sort.
fn brute_force(records: &[SignatureRecord], queries: &[Signature], t: f64, k: usize) -> Vec<(VoxelCoord, f64)> {
    let mut scored: Vec<(VoxelCoord, f64)> = records
        .iter()
        .map(|r| {
            (
                r.coord,
                queries.iter().map(|q| hamming(*q, r.sig)).min().unwrap() as f64,
            )
        })
        .collect();
    let better = |a: &(VoxelCoord, f64), b: &(VoxelCoord, f64)| a.1 < b.1 || (a.1 == b.1 && a.0 < b.0);
    let survivors: Vec<(VoxelCoord, f64)> = scored
        .iter()
        .filter(|p| !scored.iter().any(|o| better(o, p) && o.0.distance(p.0) < t))
        .copied()
        .collect();
    scored = survivors;
    scored.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    scored.truncate(k);
    scored
}

fn flatten(r: &[RankedPrediction]) -> Vec<(VoxelCoord, f64)> {
    r.iter().map(|p| (p.coord, p.distance)).collect()
}

fn query_set(sigs: &[Signature]) -> QuerySet {
    QuerySet::from_members(
        sigs.iter()
            .map(|s| QueryMember {
                source: None,
                repr: Representation::Signature(*s),
            })
            .collect(),
    )
    .unwrap()
}

#[test]
fn run_query_matches_brute_force_pipeline() {
    let records = clustered_records(5);
    assert!(records.len() <= 10_000);
    let index = MihIndex::build(records.clone(), 4, 9).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut checked_prefix = 0;
    for trial in 0..30 {
        let members = 1 + trial % 3;
        let sigs: Vec<Signature> = (0..members)
            .map(|_| records[rng.random_range(0..records.len())].sig)
            .collect();
        let t = [2.5, 4.0, 7.0][trial % 3];
        let k = 40;
        let q = query_set(&sigs);
        let expected = brute_force(&records, &sigs, t, usize::MAX);

        let scan = run_query(SearchSpace::Signatures(&records), &q, t, k).unwrap();
        assert_eq!(flatten(&scan), expected[..k.min(expected.len())].to_vec());

        // Anything within N-1 bits is guaranteed to collide, and so is every
        // better candidate that could suppress it.
        let indexed = flatten(&run_query(SearchSpace::Index(&index), &q, t, k).unwrap());
        let close = |v: &[(VoxelCoord, f64)]| v.iter().take_while(|p| p.1 <= 3.0).copied().collect::<Vec<_>>();
        let truncated: Vec<_> = expected.iter().take(k).copied().collect();
        assert_eq!(close(&indexed), close(&truncated));
        checked_prefix += close(&indexed).len();
    }
    assert!(
        checked_prefix > 100,
        "too few close matches to be meaningful: {checked_prefix}"
    );
}

struct TwoMotifs;

impl TwoMotifs {
    fn make(class: usize, rng: &mut ChaCha8Rng) -> Patch {
        let cy = rng.random_range(3.0..5.0);
        let cx = rng.random_range(3.0..5.0);
        Patch::from_fn([1, 8, 8], |_, y, x| {
            let (dy, dx) = (y as f64 - cy, x as f64 - cx);
            let v = if class == 0 {
                (-(dy * dy) / 1.5).exp()
            } else {
                let r = (dy * dy + dx * dx).sqrt();
                (-(r - 2.5).powi(2) / 0.8).exp()
            };
            0.1 + 0.8 * v
        })
    }
}

impl PatchSource for TwoMotifs {
    fn patch_shape(&self) -> [usize; 3] {
        [1, 8, 8]
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> Patch {
        let class = rng.random_range(0..2);
        Self::make(class, rng)
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

#[test]
fn trained_encoder_separates_planted_classes() {
    let model = EncoderModel::new(Layout::Planar, [1, 8, 8], 16, 3).unwrap();
    let aug = AugmentationConfig {
        rotation_set: vec![0],
        allow_reflections: false,
        max_translation: 1,
        ..AugmentationConfig::default()
    };
    let loss = LossConfig {
        batch_pairs: 8,
        ..LossConfig::default()
    };
    let cfg = TrainConfig {
        steps: 2000,
        learning_rate: 0.02,
        seed: 4,
        ..TrainConfig::default()
    };
    let (model, trace) = train(&TwoMotifs, model, &loss, &aug, &cfg).unwrap();
    let head: f64 = trace[..50].iter().sum::<f64>() / 50.0;
    let tail: f64 = trace[trace.len() - 50..].iter().sum::<f64>() / 50.0;
    assert!(tail < head, "loss did not decrease: {head} -> {tail}");

    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let emb: Vec<(usize, Vec<f64>)> = (0..40)
        .map(|i| {
            let class = i % 2;
            (class, model.encode(&TwoMotifs::make(class, &mut rng)).unwrap())
        })
        .collect();
    let (mut intra, mut inter) = (Vec::new(), Vec::new());
    for i in 0..emb.len() {
        for j in i + 1..emb.len() {
            let c = cosine(&emb[i].1, &emb[j].1);
            if emb[i].0 == emb[j].0 {
                intra.push(c);
            } else {
                inter.push(c);
            }
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    assert!(
        mean(&intra) > mean(&inter) + 0.2,
        "intra {} inter {}",
        mean(&intra),
        mean(&inter)
    );
}
