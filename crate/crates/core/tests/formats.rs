//! Binary readers on valid, truncated and bit-flipped inputs. A reader may
//! reject a damaged file but must never panic or accept a truncated one.

use byteorder::{BigEndian, WriteBytesExt};
use rvssdh::checkpoint::Checkpoint;
use rvssdh::data::{read_idx_from, read_rvf_from, write_rvf_to, LabeledDataset};
use rvssdh::retrieval::{CodeDatabase, CodeRecord, HashCode};
use rvssdh::rvssdh::{Model, ModelConfig, Variant};
use rvssdh::Rng;

fn idx_pair(images: &[[u8; 4]], labels: &[u8]) -> (Vec<u8>, Vec<u8>) {
    let mut im = Vec::new();
    for v in [0x0000_0803, images.len() as u32, 2, 2] {
        im.write_u32::<BigEndian>(v).unwrap();
    }
    images.iter().for_each(|p| im.extend_from_slice(p));
    let mut lb = Vec::new();
    for v in [0x0000_0801, labels.len() as u32] {
        lb.write_u32::<BigEndian>(v).unwrap();
    }
    lb.extend_from_slice(labels);
    (im, lb)
}

fn rvf_bytes() -> Vec<u8> {
    let samples: Vec<f32> = (0..5 * 12).map(|i| i as f32 * 0.25 - 3.0).collect();
    let ds = LabeledDataset::new([2, 2, 3], samples, vec![0, 2, 1, 2, 0], 3, "t").unwrap();
    let mut out = Vec::new();
    write_rvf_to(&mut out, &ds).unwrap();
    out
}

fn rvhc_bytes() -> Vec<u8> {
    let mut rng = Rng::seed_from_u64(9);
    let records = (0..4)
        .map(|i| CodeRecord {
            id: 10 + i,
            label: i as u32 % 2,
            code: HashCode::from_bits(&(0..70).map(|_| rng.below(2) == 1).collect::<Vec<_>>()),
        })
        .collect();
    let mut out = Vec::new();
    CodeDatabase::from_records(70, records).unwrap().write_to(&mut out).unwrap();
    out
}

fn checkpoint() -> Checkpoint {
    let mut cfg = ModelConfig::new(Variant::RandomVlad, [8, 8, 1], 3);
    cfg.backbone = Some(rvssdh::backbone::BackboneConfig { in_channels: 1, conv1_channels: 2, conv2_channels: 2 });
    cfg.clusters = 2;
    cfg.bits = 5;
    cfg.d1 = Some(4);
    cfg.d2 = Some(3);
    let m = Model::<f64>::init(cfg.clone(), &mut Rng::seed_from_u64(3), None).unwrap();
    Checkpoint {
        model: cfg,
        velocity: Some(m.params.zeros_like()),
        params: m.params,
        epoch: 7,
        rng_state: [1, u64::MAX, 3, 1 << 40],
        config_text: "bits = 5\n".into(),
    }
}

fn checkpoint_bytes() -> Vec<u8> {
    let mut out = Vec::new();
    checkpoint().write_to(&mut out).unwrap();
    out
}

/// Every strict prefix must be rejected; random flips must not panic.
fn fuzz(valid: &[u8], seed: u64, read: impl Fn(&[u8]) -> bool) {
    assert!(read(valid), "valid input rejected");
    for n in 0..valid.len() {
        assert!(!read(&valid[..n]), "prefix of {n} of {} bytes accepted", valid.len());
    }
    let mut rng = Rng::seed_from_u64(seed);
    for _ in 0..400 {
        let mut bytes = valid.to_vec();
        for _ in 0..1 + rng.below(3) {
            let i = rng.below(bytes.len());
            bytes[i] ^= 1 << rng.below(8);
        }
        let _ = read(&bytes);
    }
    // Every byte with its top bit flipped, which hits each length field.
    for i in 0..valid.len() {
        let mut bytes = valid.to_vec();
        bytes[i] ^= 0x80;
        let _ = read(&bytes);
    }
}

#[test]
fn idx_two_image_fixture_round_trips_pixels() {
    let (im, lb) = idx_pair(&[[0, 255, 51, 102], [7, 0, 0, 128]], &[3, 1]);
    let ds = read_idx_from(&mut im.as_slice(), &mut lb.as_slice()).unwrap();
    assert_eq!(ds.shape(), [2, 2, 1]);
    assert_eq!(ds.labels(), &[3, 1]);
    assert_eq!(ds.classes(), 4);
    let want: Vec<f32> = [0u8, 255, 51, 102, 7, 0, 0, 128].iter().map(|&p| p as f32 / 255.0).collect();
    assert_eq!(ds.samples(), want.as_slice());
}

#[test]
fn idx_damage_is_rejected_without_panic() {
    let (im, lb) = idx_pair(&[[1, 2, 3, 4], [5, 6, 7, 8], [9, 9, 9, 9]], &[0, 1, 0]);
    fuzz(&im, 1, |b| read_idx_from(&mut &b[..], &mut lb.as_slice()).is_ok());
    fuzz(&lb, 2, |b| read_idx_from(&mut im.as_slice(), &mut &b[..]).is_ok());
    let (_, short) = idx_pair(&[], &[0, 1]);
    assert!(read_idx_from(&mut im.as_slice(), &mut short.as_slice()).is_err());
}

#[test]
fn rvf_round_trips_and_survives_damage() {
    let bytes = rvf_bytes();
    let ds = read_rvf_from(&mut bytes.as_slice()).unwrap();
    assert_eq!(ds.shape(), [2, 2, 3]);
    assert_eq!(ds.labels(), &[0, 2, 1, 2, 0]);
    assert_eq!(ds.sample(1)[0], 12.0 * 0.25 - 3.0);
    let mut again = Vec::new();
    write_rvf_to(&mut again, &ds).unwrap();
    assert_eq!(again, bytes);
    fuzz(&bytes, 3, |b| read_rvf_from(&mut &b[..]).is_ok());
}

#[test]
fn rvf_rejects_bad_labels_and_trailing_bytes() {
    let mut bytes = rvf_bytes();
    bytes.push(0);
    assert!(read_rvf_from(&mut bytes.as_slice()).is_err());
    let mut bytes = rvf_bytes();
    // First record's label sits right after the 32-byte header.
    bytes[32] = 3;
    assert!(read_rvf_from(&mut bytes.as_slice()).is_err());
}

#[test]
fn rvhc_round_trips_and_survives_damage() {
    let bytes = rvhc_bytes();
    let db = CodeDatabase::read_from(&mut bytes.as_slice()).unwrap();
    assert_eq!((db.bits(), db.len()), (70, 4));
    let mut again = Vec::new();
    db.write_to(&mut again).unwrap();
    assert_eq!(again, bytes);
    fuzz(&bytes, 4, |b| CodeDatabase::read_from(&mut &b[..]).is_ok());
}

#[test]
fn rvhc_rejects_padding_bits_and_duplicate_ids() {
    let bytes = rvhc_bytes();
    // Header is 20 bytes; each record is id, label, then two words. Bit 70
    // lies in the padding of the second word.
    let mut padded = bytes.clone();
    padded[20 + 12 + 8] |= 1 << 6;
    assert!(CodeDatabase::read_from(&mut padded.as_slice()).is_err());
    let mut dup = bytes.clone();
    let rec = 12 + 16;
    dup[20 + rec] = 10;
    assert!(CodeDatabase::read_from(&mut dup.as_slice()).is_err());
}

#[test]
fn checkpoint_round_trips_and_survives_damage() {
    let bytes = checkpoint_bytes();
    let ck = Checkpoint::read_from(&mut bytes.as_slice(), None).unwrap();
    assert_eq!(ck, checkpoint());
    fuzz(&bytes, 5, |b| Checkpoint::read_from(&mut &b[..], None).is_ok());
}

#[test]
fn checkpoint_shape_mismatch_names_the_tensor() {
    let bytes = checkpoint_bytes();
    let mut other = checkpoint().model;
    other.d2 = Some(2);
    let e = Checkpoint::read_from(&mut bytes.as_slice(), Some(&other)).unwrap_err().to_string();
    assert!(e.contains("transform.fc2.weight"), "{e}");
}
