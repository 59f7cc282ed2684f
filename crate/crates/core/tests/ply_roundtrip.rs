use gsdistill::ply::{read_ply, write_ply};
use gsdistill::{Gaussian, GaussianScene};
use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use proptest::prelude::*;

fn gaussian() -> impl Strategy<Value = Gaussian> {
    (
        prop::array::uniform3(-50.0f64..50.0),
        prop::array::uniform3(-6.0f64..1.0),
        prop::array::uniform4(-1.0f64..1.0),
        0.001f64..0.999,
        prop::array::uniform3(0.0f64..1.0),
    )
        .prop_filter("quaternion must not vanish", |(_, _, q, _, _)| {
            q.iter().map(|v| v * v).sum::<f64>() > 1e-3
        })
        .prop_map(|(c, log_s, q, opacity, color)| Gaussian {
            center: Vector3::from(c),
            scale: Vector3::from(log_s).map(f64::exp),
            rotation: UnitQuaternion::from_quaternion(Quaternion::new(q[0], q[1], q[2], q[3])),
            opacity,
            color: Vector3::from(color),
            normal: None,
        })
}

fn scene() -> impl Strategy<Value = GaussianScene> {
    prop::collection::vec(gaussian(), 0..40).prop_flat_map(|gs| {
        let n = gs.len();
        (
            Just(gs),
            prop::option::of(prop::collection::vec(0u32..200, n)),
            prop::option::of(prop::collection::vec(0u32..5000, n)),
        )
            .prop_map(|(gs, sem, inst)| GaussianScene::new(gs).with_labels(sem, inst))
    })
}

fn encode(scene: &GaussianScene) -> Vec<u8> {
    let mut bytes = Vec::new();
    write_ply(scene, &mut bytes).unwrap();
    bytes
}

fn close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()).max(1.0)
}

proptest! {
    #[test]
    fn round_trip_within_single_precision(scene in scene()) {
        let back = read_ply(encode(&scene).as_slice()).unwrap();
        prop_assert_eq!(back.len(), scene.len());
        prop_assert_eq!(&back.semantic_labels, &scene.semantic_labels);
        prop_assert_eq!(&back.instance_labels, &scene.instance_labels);
        for (a, b) in scene.gaussians.iter().zip(&back.gaussians) {
            for k in 0..3 {
                prop_assert!(close(a.center[k], b.center[k], 1e-6));
                prop_assert!(close(a.scale[k], b.scale[k], 1e-5));
                prop_assert!(close(a.color[k], b.color[k], 1e-6));
            }
            prop_assert!(close(a.opacity, b.opacity, 1e-5));
            // q and -q are the same rotation
            prop_assert!(a.rotation.angle_to(&b.rotation) < 1e-5);
        }
    }

    #[test]
    fn truncated_files_are_rejected(scene in scene(), cut in 1usize..64) {
        prop_assume!(!scene.is_empty());
        let bytes = encode(&scene);
        let short = &bytes[..bytes.len() - cut.min(bytes.len() - 1)];
        prop_assert!(read_ply(short).is_err());
    }
}
