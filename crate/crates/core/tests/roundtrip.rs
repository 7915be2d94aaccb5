use nalgebra::{Vector3, Vector4};
use proptest::prelude::*;

use flatsplat::gaussian::{FlatGaussian, GaussianScene};
use flatsplat::io::{load_dataset, read_checkpoint, read_ply, save_dataset, write_checkpoint, write_ply, PlyFormat, TriangleMesh};
use flatsplat::render::render;
use flatsplat::synth::{generate_synthetic, SyntheticSpec};

fn gaussian() -> impl Strategy<Value = FlatGaussian> {
    (
        prop::array::uniform3(-2.0..2.0f64),
        prop::array::uniform4(-1.0..1.0f64),
        prop::array::uniform2(0.01..1.0f64),
        0.01..0.99f64,
        prop::array::uniform3(0.0..1.0f64),
    )
        .prop_filter("non-degenerate rotation", |(_, q, ..)| q.iter().map(|v| v * v).sum::<f64>() > 1e-3)
        .prop_map(|(p, q, s, o, c)| {
            FlatGaussian::new(
                Vector3::from(p),
                Vector4::from(q),
                Vector3::new(s[0], s[1], 1e-3 * s[0].min(s[1])),
                o,
                Vector3::from(c),
            )
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn checkpoint_round_trip_is_exact(gs in prop::collection::vec(gaussian(), 0..12), bg in prop::array::uniform3(0.0..1.0f64)) {
        let scene = GaussianScene::new(gs, Vector3::from(bg));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scene.ckpt");
        write_checkpoint(&path, &scene).unwrap();
        prop_assert_eq!(read_checkpoint(&path).unwrap(), scene);
    }

    #[test]
    fn binary_and_ascii_ply_agree(pts in prop::collection::vec(prop::array::uniform3(-5.0..5.0f64), 3..30)) {
        let n = pts.len() as u32;
        let mesh = TriangleMesh {
            vertices: pts.into_iter().map(Vector3::from).collect(),
            triangles: (0..n - 2).map(|k| [k, k + 1, k + 2]).collect(),
            colors: None,
        };
        let dir = tempfile::tempdir().unwrap();
        for format in [PlyFormat::Ascii, PlyFormat::BinaryLittleEndian] {
            let path = dir.path().join("mesh.ply");
            write_ply(&path, &mesh, format).unwrap();
            let back = read_ply(&path).unwrap();
            prop_assert_eq!(&back.triangles, &mesh.triangles);
            for (a, b) in back.vertices.iter().zip(&mesh.vertices) {
                // vertices are stored as 32-bit floats
                prop_assert!((a - b).norm() <= 1e-6 * (1.0 + b.norm()));
            }
        }
    }
}

#[test]
fn saved_dataset_reloads_and_renders_identically() {
    let fx = generate_synthetic(&SyntheticSpec::sphere(3, 20, 4)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_dataset(&fx.dataset, dir.path()).unwrap();
    let back = load_dataset(dir.path()).unwrap();
    assert_eq!(back.len(), 3);
    assert_eq!(back.names, fx.dataset.names);
    for (a, b) in back.images.iter().zip(&fx.dataset.images) {
        let worst = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).amax()).fold(0.0, f64::max);
        assert!(worst <= 0.5 / 255.0 + 1e-12, "{worst}");
    }

    let scene = GaussianScene::new(
        vec![FlatGaussian::new(Vector3::new(0.0, 0.0, 0.0), Vector4::new(1.0, 0.0, 0.0, 0.0), Vector3::new(0.8, 0.5, 1e-3), 0.9, Vector3::new(0.2, 0.6, 0.4))],
        Vector3::zeros(),
    );
    for (a, b) in back.cameras.iter().zip(&fx.dataset.cameras) {
        let (ra, rb) = (render(&scene, a), render(&scene, b));
        let worst = ra.depth.data().iter().zip(rb.depth.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(worst <= 1e-9, "{worst}");
    }
}
