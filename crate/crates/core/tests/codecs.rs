use std::io::Cursor;
use std::path::PathBuf;

use itmn::hdrio::{
    read_image, read_pfm, read_pnm, read_rgbe, rgbe_decode_pixel, rgbe_encode_pixel, write_pfm, write_pnm,
    write_rgbe, HdrImage, LdrImage, PnmDepth,
};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

#[derive(Deserialize)]
struct Expected {
    width: usize,
    height: usize,
    pixels: Vec<f32>,
}

fn expected(stem: &str) -> Expected {
    let text = std::fs::read_to_string(fixture(&format!("{stem}.expected.json"))).unwrap();
    serde_json::from_str(&text).unwrap()
}

/// The fixtures were written and decoded by OpenCV; decoding must agree exactly.
#[test]
fn fixtures_decode_like_opencv() {
    for (file, stem) in [("hdr/sunset.hdr", "sunset"), ("hdr/lamp.hdr", "lamp"), ("hdr/tiles.pfm", "tiles")] {
        let img = read_image(&fixture(file)).unwrap();
        let want = expected(stem);
        assert_eq!((img.width, img.height), (want.width, want.height), "{file}");
        assert_eq!(img.pixels, want.pixels, "{file}");
    }
}

#[test]
fn run_length_fixture_reencodes_exactly() {
    let img = read_image(&fixture("hdr/sunset.hdr")).unwrap();
    let mut buf = Vec::new();
    write_rgbe(&img, &mut buf).unwrap();
    let back = read_rgbe(&mut Cursor::new(buf)).unwrap();
    assert_eq!(back.pixels, img.pixels, "decoded RGBE values are exactly representable");
}

fn random_hdr(rng: &mut ChaCha8Rng, w: usize, h: usize) -> HdrImage {
    HdrImage::from_fn(w, h, |_, _| {
        let mut c = || {
            if rng.random_bool(0.05) {
                0.0
            } else {
                2f32.powf(rng.random_range(-20.0..20.0))
            }
        };
        [c(), c(), c()]
    })
}

#[test]
fn pfm_roundtrip_bit_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..50 {
        let (w, h) = (rng.random_range(1..40), rng.random_range(1..40));
        let img = random_hdr(&mut rng, w, h);
        let mut buf = Vec::new();
        write_pfm(&img, &mut buf).unwrap();
        let back = read_pfm(&mut Cursor::new(&buf)).unwrap();
        assert_eq!((back.width, back.height), (w, h));
        assert!(back.pixels.iter().zip(&img.pixels).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}

#[test]
fn pnm_roundtrip_bit_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for depth in [PnmDepth::Eight, PnmDepth::Sixteen] {
        let max = depth.maxval();
        for _ in 0..50 {
            let (w, h) = (rng.random_range(1..40), rng.random_range(1..40));
            let img = LdrImage::from_fn(w, h, |_, _| {
                let mut c = || rng.random_range(0..=max) as f32 / max as f32;
                [c(), c(), c()]
            });
            let mut buf = Vec::new();
            write_pnm(&img, depth, &mut buf).unwrap();
            let back = read_pnm(&mut Cursor::new(&buf)).unwrap();
            assert_eq!(back, img);
            let mut again = Vec::new();
            write_pnm(&back, depth, &mut again).unwrap();
            assert_eq!(again, buf);
        }
    }
}

#[test]
fn rgbe_pixel_error_bounded_by_dominant_channel() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..10_000 {
        let scale = 2f32.powf(rng.random_range(-30.0..30.0));
        let v: [f32; 3] = [rng.random::<f32>() * scale, rng.random::<f32>() * scale, rng.random::<f32>() * scale];
        let d = rgbe_decode_pixel(rgbe_encode_pixel(v[0], v[1], v[2]));
        let max = v.iter().fold(0.0f32, |m, &x| m.max(x)) as f64;
        for c in 0..3 {
            let err = (d[c] as f64 - v[c] as f64).abs();
            assert!(err <= max / 256.0, "{v:?} -> {d:?}");
        }
    }
}

#[test]
fn rgbe_file_roundtrip() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let img = random_hdr(&mut rng, 37, 9);
    let mut buf = Vec::new();
    write_rgbe(&img, &mut buf).unwrap();
    let back = read_rgbe(&mut Cursor::new(buf)).unwrap();
    for (p, q) in img.pixels.chunks(3).zip(back.pixels.chunks(3)) {
        let max = p.iter().fold(0.0f32, |m, &x| m.max(x)) as f64;
        for c in 0..3 {
            assert!((p[c] as f64 - q[c] as f64).abs() <= max / 256.0);
        }
    }
}

type Decoder = fn(&[u8]) -> bool;

fn decoders() -> [(&'static str, Vec<u8>, Decoder); 3] {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let img = random_hdr(&mut rng, 12, 10);
    let ldr = LdrImage::from_fn(12, 10, |x, y| [x as f32 / 12.0, y as f32 / 10.0, 0.5]);
    let (mut pfm, mut pnm) = (Vec::new(), Vec::new());
    write_pfm(&img, &mut pfm).unwrap();
    write_pnm(&ldr, PnmDepth::Eight, &mut pnm).unwrap();
    let rle = std::fs::read(fixture("hdr/lamp.hdr")).unwrap();
    [
        ("pfm", pfm, |b| read_pfm(&mut Cursor::new(b)).is_ok()),
        ("pnm", pnm, |b| read_pnm(&mut Cursor::new(b)).is_ok()),
        ("rgbe", rle, |b| read_rgbe(&mut Cursor::new(b)).is_ok()),
    ]
}

/// Pure noise, truncations and byte flips of valid files: every input must
/// come back as a value or a structured error, never a panic.
#[test]
fn decoders_survive_fuzzing() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    for (name, valid, decode) in decoders() {
        assert!(decode(&valid), "{name} seed file must decode");
        let mut ok = 0;
        for case in 0..1000 {
            let bytes = match case % 3 {
                0 => {
                    let mut b = vec![0u8; rng.random_range(0..256)];
                    rng.fill_bytes(&mut b);
                    b
                }
                1 => valid[..rng.random_range(0..valid.len())].to_vec(),
                _ => {
                    let mut b = valid.clone();
                    for _ in 0..rng.random_range(1..8) {
                        let i = rng.random_range(0..b.len());
                        b[i] = rng.random();
                    }
                    b
                }
            };
            let result = std::panic::catch_unwind(|| decode(&bytes));
            assert!(result.is_ok(), "{name} panicked on case {case}");
            ok += result.unwrap() as usize;
        }
        assert!(ok < 1000, "{name}: corrupted input should not always decode");
    }
}

#[test]
fn unknown_extension_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("x.exr");
    std::fs::write(&p, b"data").unwrap();
    assert!(read_image(&p).is_err());
}
