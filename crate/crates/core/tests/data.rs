use std::path::Path;

use agat::data::{batches, load_cifar_binary, load_idx, synthetic_blobs};
use agat::Error;

fn idx(dims: &[u32], magic: u32, payload: &[u8]) -> Vec<u8> {
    let mut out = magic.to_be_bytes().to_vec();
    for d in dims {
        out.extend_from_slice(&d.to_be_bytes());
    }
    out.extend_from_slice(payload);
    out
}

fn write(dir: &Path, name: &str, bytes: &[u8]) -> std::path::PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, bytes).unwrap();
    p
}

#[test]
fn idx_header_sizes_and_scaling() {
    let dir = tempfile::tempdir().unwrap();
    // Full-size MNIST training header: 60000 images of 28×28.
    let n = 60_000usize;
    let mut pixels = vec![0u8; n * 784];
    pixels[0] = 255;
    pixels[1] = 51;
    let labels: Vec<u8> = (0..n).map(|i| (i % 10) as u8).collect();
    let images = write(dir.path(), "img", &idx(&[n as u32, 28, 28], 0x803, &pixels));
    let label_file = write(dir.path(), "lab", &idx(&[n as u32], 0x801, &labels));
    let d = load_idx(&images, &label_file).unwrap();
    assert_eq!(d.len(), 60_000);
    assert_eq!(d.image_shape(), [1, 28, 28]);
    assert_eq!(d.images.data()[0], 1.0);
    assert_eq!(d.images.data()[1], 0.2);
    assert_eq!(d.labels[9], 9);
}

#[test]
fn truncated_idx_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let images = write(dir.path(), "img", &idx(&[2, 2, 2], 0x803, &[0; 7]));
    let labels = write(dir.path(), "lab", &idx(&[2], 0x801, &[0, 1]));
    match load_idx(&images, &labels) {
        Err(Error::Format { path, .. }) => assert_eq!(path, images),
        other => panic!("unexpected {other:?}"),
    }
    let short_header = write(dir.path(), "short", &[0, 0, 8]);
    assert!(matches!(load_idx(&short_header, &labels), Err(Error::Format { .. })));
    assert!(matches!(
        load_idx(&dir.path().join("missing"), &labels),
        Err(Error::DataIo { .. })
    ));
}

#[test]
fn cifar_records() {
    let dir = tempfile::tempdir().unwrap();
    let mut one = vec![9u8];
    one.extend((0..3072).map(|i| (i % 256) as u8));
    let single = write(dir.path(), "one.bin", &one);
    let d = load_cifar_binary(&[single]).unwrap();
    assert_eq!((d.len(), d.labels[0]), (1, 9));
    assert_eq!(d.image_shape(), [3, 32, 32]);
    assert_eq!(d.images.data()[255], 1.0);

    let batch = write(dir.path(), "batch.bin", &one.repeat(10_000));
    assert_eq!(load_cifar_binary(&[batch]).unwrap().len(), 10_000);

    let ragged = write(dir.path(), "ragged.bin", &one[..3000]);
    assert!(matches!(load_cifar_binary(&[ragged]), Err(Error::Format { .. })));
}

#[test]
fn noiseless_blobs_are_linearly_separable() {
    let d = synthetic_blobs(60, 3, 8, 0.0, 4).unwrap();
    // Nearest-template classification is a linear rule: argmax_c (t_c·x − |t_c|²/2).
    let size = 64;
    let templates: Vec<&[f64]> = (0..3).map(|c| &d.images.data()[c * size..(c + 1) * size]).collect();
    for i in 0..d.len() {
        let x = &d.images.data()[i * size..(i + 1) * size];
        let score = |t: &[f64]| {
            let dot: f64 = t.iter().zip(x).map(|(a, b)| a * b).sum();
            let norm: f64 = t.iter().map(|a| a * a).sum();
            dot - 0.5 * norm
        };
        let best = (0..3)
            .max_by(|&a, &b| score(templates[a]).total_cmp(&score(templates[b])))
            .unwrap();
        assert_eq!(best, d.labels[i]);
    }
    assert_eq!(d, synthetic_blobs(60, 3, 8, 0.0, 4).unwrap());
}

#[test]
fn epochs_reshuffle() {
    let a = batches(100, 10, 3, 0);
    assert_eq!(a, batches(100, 10, 3, 0));
    for epoch in 1..20 {
        assert_ne!(a, batches(100, 10, 3, epoch));
    }
    let mut all: Vec<usize> = a.concat();
    all.sort_unstable();
    assert_eq!(all, (0..100).collect::<Vec<_>>());
}
