use fusenet::vgr::{decode_volume, encode_volume, read_volume, write_volume};
use fusenet::Error;
use fusenet_core::volgrid::{MultiChannelVolume, ScalarVolume};
use proptest::prelude::*;

fn volume(dims: [usize; 3], channels: usize, seed: u32) -> MultiChannelVolume {
    let chans: Vec<ScalarVolume> = (0..channels)
        .map(|c| {
            ScalarVolume::from_fn(dims, [0.7, 1.0, 2.5], |x, y, z| {
                let h = (x as u32).wrapping_mul(73856093) ^ (y as u32).wrapping_mul(19349663) ^ (z as u32).wrapping_mul(83492791) ^ (c as u32).wrapping_mul(2654435761) ^ seed;
                (h % 100_000) as f32 * 1e-3 - 50.0
            })
            .unwrap()
        })
        .collect();
    MultiChannelVolume::from_channels(&chans).unwrap()
}

#[test]
fn constant_volume_roundtrips_through_a_file() {
    let dir = tempfile::tempdir().unwrap();
    let v = MultiChannelVolume::from(ScalarVolume::filled([3; 3], [1.0; 3], 0.5).unwrap());
    let path = dir.path().join("c.vgr");
    write_volume(&v, &path).unwrap();
    let back = read_volume(&path).unwrap();
    assert_eq!(back, v);
    assert!(back.data().iter().all(|x| x.to_bits() == 0.5f32.to_bits()));
    let first = std::fs::read(&path).unwrap();
    write_volume(&v, &path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), first);
}

#[test]
fn header_claiming_two_channels_over_one_payload() {
    let v = volume([4, 4, 4], 1, 1);
    let bytes = encode_volume(&v).unwrap();
    let h = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let header = std::str::from_utf8(&bytes[8..8 + h]).unwrap().replace("\"channels\":1", "\"channels\":2");
    let mut forged = b"VGR1".to_vec();
    forged.extend((header.len() as u32).to_le_bytes());
    forged.extend(header.as_bytes());
    forged.extend(&bytes[8 + h..]);
    assert!(matches!(decode_volume(&forged), Err(Error::HeaderMismatch(_))));
}

#[test]
fn missing_file_is_io_failure() {
    assert!(matches!(read_volume("/nonexistent/x.vgr"), Err(Error::Io { .. })));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]
    #[test]
    fn roundtrip_is_bitwise(channels in prop::sample::select(vec![1usize, 2, 13, 60]), x in 1usize..6, y in 1usize..6, z in 1usize..6, seed: u32) {
        let v = volume([x, y, z], channels, seed);
        let bytes = encode_volume(&v).unwrap();
        let back = decode_volume(&bytes).unwrap();
        prop_assert_eq!(back.dims(), v.dims());
        prop_assert_eq!(back.spacing(), v.spacing());
        prop_assert!(back.data().iter().zip(v.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        prop_assert_eq!(encode_volume(&back).unwrap(), bytes);
    }
}
