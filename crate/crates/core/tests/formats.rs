use proptest::prelude::*;

use seqada::model::{load_model, save_model, SegModel};
use seqada::volume::{
    read_mask, read_probability_map, read_volume, write_mask, write_probability_map, write_volume, Dims,
    LabelMask, ProbabilityMap, Volume3D,
};
use seqada::Error;

fn dims() -> impl Strategy<Value = Dims> {
    (1usize..6, 1usize..6, 1usize..6).prop_map(|(x, y, z)| Dims::new(x, y, z))
}

fn volume() -> impl Strategy<Value = Volume3D> {
    dims().prop_flat_map(|d| {
        prop::collection::vec(-1e6f32..1e6, d.len()).prop_map(move |v| Volume3D::new(d, v).unwrap())
    })
}

fn mask() -> impl Strategy<Value = LabelMask> {
    dims().prop_flat_map(|d| {
        prop::collection::vec(0u16..5, d.len()).prop_map(move |v| LabelMask::new(d, v).unwrap())
    })
}

/// Probabilities that are exactly representable in `f32`.
fn probability_map() -> impl Strategy<Value = ProbabilityMap> {
    (dims(), 2usize..5).prop_flat_map(|(d, c)| {
        prop::collection::vec(0.01f64..1.0, d.len() * c).prop_map(move |raw| {
            let probs = raw
                .chunks_exact(c)
                .flat_map(|row| {
                    let s: f64 = row.iter().sum();
                    row.iter().map(move |v| f64::from((v / s) as f32))
                })
                .collect();
            ProbabilityMap::new(d, c, probs).unwrap()
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn volumes_roundtrip(v in volume()) {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.avol");
        write_volume(&p, &v).unwrap();
        prop_assert_eq!(read_volume(&p).unwrap(), v);
    }

    #[test]
    fn masks_roundtrip(m in mask()) {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.avol");
        write_mask(&p, &m).unwrap();
        prop_assert_eq!(read_mask(&p).unwrap(), m);
    }

    #[test]
    fn probability_maps_roundtrip(pm in probability_map()) {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("p.avol");
        write_probability_map(&p, &pm).unwrap();
        let back = read_probability_map(&p).unwrap();
        prop_assert_eq!(back.classes(), pm.classes());
        prop_assert!(back.probs().iter().zip(pm.probs()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn checkpoints_roundtrip(w in prop::collection::vec(-10.0f64..10.0, 2 * 13)) {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.aseg");
        let model = SegModel::from_weights(3, 2, w).unwrap();
        save_model(&p, &model).unwrap();
        let back = load_model(&p).unwrap();
        prop_assert_eq!(back.checksum(), model.checksum());
        prop_assert_eq!(back, model);
    }
}

#[test]
fn reading_the_wrong_kind_is_a_format_error() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.avol");
    write_mask(&p, &LabelMask::zeros(Dims::cube(2))).unwrap();
    assert!(matches!(read_volume(&p), Err(Error::Format { .. })));
    assert!(matches!(read_volume(dir.path().join("none.avol")), Err(Error::Io { .. })));
}
