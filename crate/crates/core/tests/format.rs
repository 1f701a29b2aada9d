//! Byte-level layout of version-1 files, built independently of the writer.

use reflow_core::autodiff::Tensor;
use reflow_core::checkpoint::{read_header, Checkpoint};
use reflow_core::data::{read_dataset, write_dataset, Dataset, PointSet, SampleItem, SampleSet, Split};
use reflow_core::model::{DecoderConfig, ModelConfig, VelocityModel};
use reflow_core::ode::SolverSpec;

#[derive(Default)]
struct Bytes(Vec<u8>);

impl Bytes {
    fn u8(mut self, v: u8) -> Self {
        self.0.push(v);
        self
    }
    fn u32(mut self, v: u32) -> Self {
        self.0.extend_from_slice(&v.to_le_bytes());
        self
    }
    fn f32(mut self, v: f32) -> Self {
        self.0.extend_from_slice(&v.to_le_bytes());
        self
    }
    fn f64(mut self, v: f64) -> Self {
        self.0.extend_from_slice(&v.to_le_bytes());
        self
    }
    fn raw(mut self, v: &[u8]) -> Self {
        self.0.extend_from_slice(v);
        self
    }
}

#[test]
fn points_v1_layout() {
    let expected = Bytes::default()
        .raw(b"RFDS")
        .u32(1)
        .u32(2)
        .u32(3) // n
        .u32(2) // dim
        .u32(1)
        .u32(1)
        .u32(1)
        .u8(0)
        .f32(1.5)
        .f32(-2.0)
        .u8(1)
        .f32(0.25)
        .f32(3.0)
        .u8(2)
        .f32(-0.5)
        .f32(0.0)
        .0;
    let set = PointSet::new(
        Tensor::new(vec![3, 2], vec![1.5, -2.0, 0.25, 3.0, -0.5, 0.0]).unwrap(),
        vec![Split::Train, Split::Val, Split::Test],
    )
    .unwrap();
    let ds = Dataset::Points(set);
    assert_eq!(write_dataset(&ds).unwrap(), expected);
    assert_eq!(read_dataset(&expected).unwrap(), ds);
}

#[test]
fn samples_v1_layout_with_solver_block() {
    let expected = Bytes::default()
        .raw(b"RFDS")
        .u32(1)
        .u32(4)
        .u32(2) // generation
        .u8(0) // euler
        .u32(50)
        .f64(1e-5)
        .f64(1e-5)
        .u32(10_000)
        .f64(1e-2)
        .u32(2) // dim
        .u32(2) // n_samples
        .u32(u32::MAX)
        .u32(1)
        .f32(0.5)
        .f32(-0.5)
        .u32(7)
        .u32(2)
        .f32(1.0)
        .f32(2.0)
        .f32(3.0)
        .f32(4.0)
        .0;
    let items = vec![
        SampleItem {
            cond_ref: None,
            data: Tensor::new(vec![1, 2], vec![0.5, -0.5]).unwrap(),
        },
        SampleItem {
            cond_ref: Some(7),
            data: Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
        },
    ];
    let ds = Dataset::Samples(SampleSet::new(2, 2, SolverSpec::euler(50), items).unwrap());
    assert_eq!(write_dataset(&ds).unwrap(), expected);
    assert_eq!(read_dataset(&expected).unwrap(), ds);
}

#[test]
fn reader_rejects_other_versions_and_trailing_bytes() {
    let good = Bytes::default()
        .raw(b"RFDS")
        .u32(1)
        .u32(2)
        .u32(1)
        .u32(1)
        .u32(1)
        .u32(0)
        .u32(0)
        .u8(0)
        .f32(1.0)
        .0;
    assert!(read_dataset(&good).is_ok());
    let mut v2 = good.clone();
    v2[4] = 2;
    assert!(read_dataset(&v2).unwrap_err().to_string().contains("version"));
    let mut trailing = good.clone();
    trailing.push(0);
    assert!(read_dataset(&trailing).is_err());
    let mut kind = good;
    kind[8] = 9;
    assert!(read_dataset(&kind).is_err());
}

#[test]
fn checkpoint_v1_prefix_and_manifest() {
    let model = VelocityModel::new(
        ModelConfig::unconditional(DecoderConfig {
            n_blocks: 1,
            channels: 4,
            mel_bins: 2,
            condition_channels: 0,
            kernel_size: 1,
            step_hidden: 4,
        }),
        0,
    )
    .unwrap();
    let bytes = Checkpoint::from_model(model.clone(), None).to_bytes().unwrap();
    assert_eq!(&bytes[..4], b"RFTT");
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
    let (header, manifest) = read_header(&bytes).unwrap();
    assert_eq!(header.generation, 1);
    assert!(header.adam.is_none() && header.rng.is_none());
    assert_eq!(manifest.len(), model.params().len());
    let mut end = 0;
    for (entry, (name, t)) in manifest.iter().zip(model.params().iter()) {
        assert_eq!(entry.name, format!("param/{name}"));
        assert_eq!(entry.shape, t.shape());
        assert_eq!(entry.offset as usize, end);
        assert_eq!(entry.nbytes as usize, 8 * t.len());
        end += 8 * t.len();
    }
    let payload = &bytes[bytes.len() - end..];
    let (name, first) = model.params().iter().next().unwrap();
    let stored = f64::from_le_bytes(payload[..8].try_into().unwrap());
    assert_eq!(stored.to_bits(), first.data()[0].to_bits(), "{name}");
}

#[test]
fn committed_v1_corpus_fixture_still_reads() {
    let bytes = include_bytes!("fixtures/corpus_v1.rfds");
    let Dataset::Corpus(c) = read_dataset(bytes).unwrap() else {
        panic!("fixture is not a corpus");
    };
    assert_eq!(c, reflow_core::data::gen_corpus(16, 16, 10, 42).unwrap());
    assert_eq!(write_dataset(&Dataset::Corpus(c)).unwrap(), bytes.as_slice());
}
