use embedforge::datasets::{
    export_embeddings, import_embeddings, load_idx, parse_idx, read_embeddings, write_embeddings,
};
use embedforge::error::Error;
use embedforge::losses::EmbeddingBatch;
use embedforge::nn::{AdamConfig, AdamState, Checkpoint, MlpParams};
use embedforge::sampler::draw_rng;
use ndarray::Array2;
use proptest::prelude::*;

fn idx_images(count: u32, rows: u32, cols: u32, pixels: &[u8]) -> Vec<u8> {
    let mut out = Vec::new();
    for v in [0x0803u32, count, rows, cols] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

fn idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&0x0801u32.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

fn location(err: Error) -> String {
    match err {
        Error::Format { location, .. } => location,
        other => panic!("expected a format error, got {other:?}"),
    }
}

#[test]
fn idx_fixture_decodes_pixels_and_labels() {
    let pixels: Vec<u8> = (0..12).map(|i| (i * 20) as u8).collect();
    let (items, labels) = parse_idx(&idx_images(3, 2, 2, &pixels), &idx_labels(&[7, 3, 7]), "img", "lbl").unwrap();
    assert_eq!(items.dim(), (3, 4));
    assert_eq!(items[[1, 0]], 80.0 / 255.0);
    assert_eq!(items[[2, 3]], 220.0 / 255.0);
    assert_eq!(labels, vec![7, 3, 7]);
}

#[test]
fn idx_files_load_with_dense_labels() {
    let dir = tempfile::tempdir().unwrap();
    let (img, lbl) = (dir.path().join("img.idx"), dir.path().join("lbl.idx"));
    std::fs::write(&img, idx_images(4, 1, 3, &[0; 12])).unwrap();
    std::fs::write(&lbl, idx_labels(&[9, 2, 9, 5])).unwrap();
    let ds = load_idx(&img, &lbl).unwrap();
    assert_eq!(ds.len(), 4);
    assert_eq!(ds.num_identities(), 3);
    assert_eq!(ds.labels, vec![2, 0, 2, 1]);
    assert_eq!(ds.metadata.original_labels, vec![2, 5, 9]);
}

#[test]
fn malformed_idx_reports_byte_offsets() {
    let good_labels = idx_labels(&[1, 2]);
    let mut bad_magic = idx_images(2, 1, 1, &[0, 0]);
    bad_magic[3] = 0x04;
    assert_eq!(location(parse_idx(&bad_magic, &good_labels, "i", "l").unwrap_err()), "byte 0");

    let truncated = idx_images(2, 2, 2, &[0; 5]);
    assert_eq!(location(parse_idx(&truncated, &good_labels, "i", "l").unwrap_err()), "byte 21");

    let short_header = &idx_images(2, 1, 1, &[0, 0])[..10];
    assert_eq!(location(parse_idx(short_header, &good_labels, "i", "l").unwrap_err()), "byte 8");

    let mismatched = idx_labels(&[1, 2, 3]);
    assert_eq!(
        location(parse_idx(&idx_images(2, 1, 1, &[0, 0]), &mismatched, "i", "l").unwrap_err()),
        "byte 4"
    );

    let huge = idx_images(u32::MAX, u32::MAX, u32::MAX, &[]);
    assert!(matches!(parse_idx(&huge, &good_labels, "i", "l"), Err(Error::Format { .. })));
}

#[test]
fn malformed_csv_reports_line_numbers() {
    let text = "label,e0,e1\n0,1.0,2.0\n1,oops,3.0\n";
    assert_eq!(location(read_embeddings(text.as_bytes(), "t.csv").unwrap_err()), "line 3");
    let ragged = "label,e0,e1\n0,1.0\n";
    assert_eq!(location(read_embeddings(ragged.as_bytes(), "t.csv").unwrap_err()), "line 2");
    let no_label = "id,e0\n0,1\n";
    assert_eq!(location(read_embeddings(no_label.as_bytes(), "t.csv").unwrap_err()), "line 1");
}

proptest! {
    #[test]
    fn embedding_csv_round_trips_exactly(
        (n, d) in (1usize..20, 1usize..6),
        seed in any::<u64>(),
    ) {
        use rand::Rng;
        let mut rng = draw_rng(seed, 0);
        let rows = Array2::from_shape_simple_fn((n, d), || rng.random_range(-1e6..1e6) * rng.random::<f64>());
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..1000)).collect();
        let batch = EmbeddingBatch::new(rows, labels).unwrap();
        let mut buf = Vec::new();
        write_embeddings(&batch, &mut buf).unwrap();
        let (back, back_labels) = read_embeddings(buf.as_slice(), "mem").unwrap();
        prop_assert_eq!(&back, batch.vectors());
        prop_assert_eq!(back_labels, batch.labels().iter().map(|&l| l as u64).collect::<Vec<_>>());
    }
}

#[test]
fn embedding_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("e.csv");
    let batch = EmbeddingBatch::new(
        ndarray::array![[0.1, -2.5e-300], [1.0 / 3.0, 7.0]],
        vec![4, 0],
    )
    .unwrap();
    export_embeddings(&batch, &path).unwrap();
    assert_eq!(import_embeddings(&path).unwrap(), batch);
}

#[test]
fn checkpoints_round_trip_bit_exactly() {
    let params = MlpParams::init(&[5, 7, 3], &mut draw_rng(3, 0)).unwrap();
    let mut adam = AdamState::new(AdamConfig::default(), &params);
    adam.step_count = 12;
    let ckpt = Checkpoint::new(params, Some(adam));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.json");
    ckpt.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back, ckpt);
    assert_eq!(back.to_json().unwrap(), ckpt.to_json().unwrap());
}

#[test]
fn corrupt_checkpoint_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.json");
    std::fs::write(&path, "{\"format_version\": 1, \"params\": {\"layers\": []}}").unwrap();
    assert!(Checkpoint::load(&path).is_err());
    assert!(matches!(Checkpoint::load(&dir.path().join("missing.json")), Err(Error::Config(_))));
}
