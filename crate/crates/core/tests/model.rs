use ndarray::{s, Array2, Array4, Array5, Axis};
use proptest::prelude::*;
use vsr_core::adapter::is_adapter_param;
use vsr_core::model::{build_image_unet, build_video_unet, forward_image, forward_video, ModelConfig, Stage};
use vsr_core::{rng, Error, ImageBatch, ParameterStore, TextTokens, VideoBatch};

fn tiny() -> ModelConfig {
    ModelConfig {
        base_channels: 8,
        text_embed_dim: 8,
        adapter_proj_dim: 4,
        frames: 3,
        height: 16,
        width: 16,
        ..ModelConfig::default()
    }
}

fn random_images(cfg: &ModelConfig, n: usize, seed: u64) -> ImageBatch<f64> {
    let mut r = rng::rng(seed);
    let a = rng::normal_array::<f64>(&mut r, &[n, cfg.in_channels(), cfg.height, cfg.width]);
    ImageBatch::new(a.into_dimensionality().unwrap()).unwrap()
}

fn random_clips(cfg: &ModelConfig, b: usize, seed: u64) -> VideoBatch<f64> {
    let mut r = rng::rng(seed);
    let a = rng::normal_array::<f64>(&mut r, &[b, cfg.frames, cfg.in_channels(), cfg.height, cfg.width]);
    VideoBatch::new(a.into_dimensionality().unwrap()).unwrap()
}

fn tokens(cfg: &ModelConfig, rows: usize, seed: u64) -> TextTokens {
    let ids = Array2::from_shape_fn((rows, 4), |(r, c)| ((r * 7 + c * 3 + seed as usize) % cfg.vocab_size) as u32);
    TextTokens::new(ids, cfg.vocab_size).unwrap()
}

#[test]
fn same_seed_builds_identical_bytes() {
    let cfg = tiny();
    let a = build_image_unet::<f32>(&cfg, 9).unwrap();
    let b = build_image_unet::<f32>(&cfg, 9).unwrap();
    assert_eq!(a.to_bytes().unwrap(), b.to_bytes().unwrap());
    let c = build_image_unet::<f32>(&cfg, 10).unwrap();
    assert_ne!(a.to_bytes().unwrap(), c.to_bytes().unwrap());
}

#[test]
fn four_encoder_and_decoder_stages() {
    let p = build_image_unet::<f32>(&tiny(), 0).unwrap();
    for stage in ["2x", "4x", "8x", "16x"] {
        assert!(p.names().any(|n| n.starts_with(&format!("down.{stage}."))), "down.{stage}");
        assert!(p.names().any(|n| n.starts_with(&format!("up.{stage}."))), "up.{stage}");
    }
    assert_eq!(p.get("out.conv.weight").unwrap().shape()[0], 3);
}

/// Layer-by-layer tally for base 8, multipliers [1,2,2,4], one res block per
/// stage, cross-attention at 16x, text width 8, vocabulary 16, RGB.
#[test]
fn parameter_count_matches_hand_tally() {
    let conv = |cin: usize, cout: usize, k: usize| cout * cin * k * k + cout;
    let temb = 32;
    let res = |cin: usize, cout: usize| {
        2 * cin + conv(cin, cout, 3) + temb * cout + cout + 2 * cout + conv(cout, cout, 3) + if cin != cout { conv(cin, cout, 1) } else { 0 }
    };
    let xattn = |c: usize| 2 * c + c * c + 8 * c + 8 * c + c * c + c;
    let mut total = 0;
    total += 8 * 32 + 32 + 32 * 32 + 32; // time MLP
    total += 16 * 8; // text embedding
    total += conv(6, 8, 3); // conv_in
    // encoder: stride-2 conv at the incoming width, then the stage body
    total += conv(8, 8, 3) + res(8, 8);
    total += conv(8, 8, 3) + res(8, 16);
    total += conv(16, 16, 3) + res(16, 16);
    total += conv(16, 16, 3) + res(16, 32) + xattn(32);
    total += res(32, 32); // middle
    // decoder: concat with the skip, stage body, upsampling conv
    total += res(32 + 32, 32) + xattn(32) + conv(32, 32, 3);
    total += res(32 + 16, 16) + conv(16, 16, 3);
    total += res(16 + 16, 16) + conv(16, 16, 3);
    total += res(16 + 8, 8) + conv(8, 8, 3);
    total += 2 * 16 + conv(16, 3, 3); // output norm and conv over concat with conv_in features
    let cfg = ModelConfig {
        frames: 8,
        height: 32,
        width: 32,
        ..tiny()
    };
    let image = build_image_unet::<f32>(&cfg, 0).unwrap();
    assert_eq!(image.count(|_| true), total);

    // literal adapters: token width C·H·W at 8x (16 ch, 4x4) and 16x (32 ch, 2x2), d = 4, both paths
    let adapters = 2 * (4 * 256 * 4) + 2 * (4 * 128 * 4);
    let video = build_video_unet::<f32>(&cfg, 0, 1).unwrap();
    assert_eq!(video.count(is_adapter_param), adapters);
    assert_eq!(video.count(|_| true), total + adapters);
}

#[test]
fn image_forward_shape_and_purity() {
    let cfg = ModelConfig {
        height: 32,
        width: 32,
        ..tiny()
    };
    let p = build_image_unet::<f64>(&cfg, 1).unwrap();
    let x = random_images(&cfg, 2, 3);
    let text = tokens(&cfg, 2, 0);
    let a = forward_image(&p, &cfg, &x, &[4, 90], &text).unwrap();
    assert_eq!(a.dim(), (2, cfg.out_channels(), 32, 32));
    let b = forward_image(&p, &cfg, &x, &[4, 90], &text).unwrap();
    assert_eq!(a, b);
}

#[test]
fn permuting_the_batch_permutes_outputs() {
    let cfg = tiny();
    let p = build_image_unet::<f64>(&cfg, 2).unwrap();
    let x = random_images(&cfg, 3, 4);
    let text = tokens(&cfg, 3, 1);
    let t = [3, 50, 7];
    let y = forward_image(&p, &cfg, &x, &t, &text).unwrap();
    let perm = [2, 0, 1];
    let xp = ImageBatch::new(x.data.select(Axis(0), &perm)).unwrap();
    let tp: Vec<usize> = perm.iter().map(|&i| t[i]).collect();
    let yp = forward_image(&p, &cfg, &xp, &tp, &text.rows(&perm)).unwrap();
    for (k, &i) in perm.iter().enumerate() {
        assert_eq!(yp.data.index_axis(Axis(0), k), y.data.index_axis(Axis(0), i));
    }
}

#[test]
fn video_without_adapters_equals_per_frame_image_model() {
    let cfg = tiny();
    let p = build_video_unet::<f64>(&cfg, 5, 6).unwrap();
    let v = random_clips(&cfg, 2, 7);
    let text = tokens(&cfg, 2, 2);
    let y = forward_video(&p, &cfg, &v, &[11, 60], &text, false).unwrap();
    assert_eq!(y.dim(), (2, cfg.frames, cfg.out_channels(), cfg.height, cfg.width));
    for b in 0..2 {
        for f in 0..cfg.frames {
            let frame = v.data.slice(s![b, f..f + 1, .., .., ..]).to_owned();
            let one = forward_image(&p, &cfg, &ImageBatch::new(frame).unwrap(), &[[11, 60][b]], &text.rows(&[b])).unwrap();
            assert_eq!(one.data.index_axis(Axis(0), 0), y.data.slice(s![b, f, .., .., ..]));
        }
    }
}

#[test]
fn zero_initialized_adapters_do_not_change_outputs() {
    let cfg = tiny();
    let p = build_video_unet::<f64>(&cfg, 5, 6).unwrap();
    let v = random_clips(&cfg, 1, 8);
    let text = tokens(&cfg, 1, 3);
    let on = forward_video(&p, &cfg, &v, &[20], &text, true).unwrap();
    let off = forward_video(&p, &cfg, &v, &[20], &text, false).unwrap();
    assert_eq!(on, off);
}

#[test]
fn nonzero_adapters_mix_frames() {
    let cfg = tiny();
    let mut p = build_video_unet::<f64>(&cfg, 5, 6).unwrap();
    let name = "adapter.up.8x.w_o";
    let shape = p.get(name).unwrap().shape().to_vec();
    p.set(name, rng::normal_array(&mut rng::rng(1), &shape)).unwrap();
    let v = random_clips(&cfg, 1, 8);
    let text = tokens(&cfg, 1, 3);
    let on = forward_video(&p, &cfg, &v, &[20], &text, true).unwrap();
    let off = forward_video(&p, &cfg, &v, &[20], &text, false).unwrap();
    assert_ne!(on, off);
}

#[test]
fn missing_adapters_are_reported() {
    let cfg = tiny();
    let p = build_image_unet::<f64>(&cfg, 0).unwrap();
    let v = random_clips(&cfg, 1, 1);
    let err = forward_video(&p, &cfg, &v, &[0], &tokens(&cfg, 1, 0), true).unwrap_err();
    assert!(matches!(err, Error::Parameter(ref m) if m.contains("adapter.down.8x.w_q")), "{err}");
}

#[test]
fn text_only_matters_through_cross_attention() {
    let with = tiny();
    let without = ModelConfig {
        cross_attention_stages: vec![],
        ..tiny()
    };
    let x = random_images(&with, 1, 12);
    let (ta, tb) = (tokens(&with, 1, 0), tokens(&with, 1, 5));
    assert_ne!(ta, tb);
    let p = build_image_unet::<f64>(&with, 3).unwrap();
    assert_ne!(forward_image(&p, &with, &x, &[9], &ta).unwrap(), forward_image(&p, &with, &x, &[9], &tb).unwrap());
    let q = build_image_unet::<f64>(&without, 3).unwrap();
    assert!(!q.names().any(|n| n.contains(".attn.")));
    assert_eq!(forward_image(&q, &without, &x, &[9], &ta).unwrap(), forward_image(&q, &without, &x, &[9], &tb).unwrap());
}

#[test]
fn video_count_is_image_plus_adapters() {
    for mode in [vsr_core::model::AdapterMode::Literal, vsr_core::model::AdapterMode::SpatialShared] {
        let cfg = ModelConfig {
            adapter_mode: mode,
            adapter_sites: vec![Stage::X4, Stage::X16],
            ..tiny()
        };
        let image = build_image_unet::<f32>(&cfg, 0).unwrap();
        let video = build_video_unet::<f32>(&cfg, 0, 0).unwrap();
        assert_eq!(video.count(|_| true), image.count(|_| true) + video.count(is_adapter_param));
    }
}

#[test]
fn bad_inputs_are_rejected() {
    let cfg = tiny();
    let p = build_image_unet::<f64>(&cfg, 0).unwrap();
    let wrong_channels = ImageBatch::new(Array4::zeros((1, 3, 16, 16))).unwrap();
    assert!(matches!(forward_image(&p, &cfg, &wrong_channels, &[0], &tokens(&cfg, 1, 0)), Err(Error::Shape(_))));
    let odd = ImageBatch::new(Array4::zeros((1, 6, 20, 16))).unwrap();
    assert!(matches!(forward_image(&p, &cfg, &odd, &[0], &tokens(&cfg, 1, 0)), Err(Error::Shape(_))));
    let x = random_images(&cfg, 1, 0);
    let long = TextTokens::new(Array2::zeros((1, cfg.max_text_len + 1)), cfg.vocab_size).unwrap();
    assert!(matches!(forward_image(&p, &cfg, &x, &[0], &long), Err(Error::Shape(_))));
    let out_of_vocab = TextTokens { ids: Array2::from_elem((1, 2), 99) };
    assert!(matches!(forward_image(&p, &cfg, &x, &[0], &out_of_vocab), Err(Error::Index(_))));
}

#[test]
fn f32_and_f64_agree_closely() {
    let cfg = tiny();
    let p64 = build_image_unet::<f64>(&cfg, 4).unwrap();
    let p32: ParameterStore<f32> = p64.cast();
    let x = random_images(&cfg, 1, 5);
    let text = tokens(&cfg, 1, 0);
    let y64 = forward_image(&p64, &cfg, &x, &[30], &text).unwrap();
    let x32 = ImageBatch::new(x.data.mapv(|v| v as f32)).unwrap();
    let y32 = forward_image(&p32, &cfg, &x32, &[30], &text).unwrap();
    let worst = y64.data.iter().zip(y32.data.iter()).map(|(a, b)| (a - *b as f64).abs()).fold(0.0, f64::max);
    assert!(worst < 1e-4, "{worst}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn folding_frames_commutes_with_the_image_model(seed in 0u64..1000, t in 0usize..100) {
        let cfg = ModelConfig { frames: 2, ..tiny() };
        let p = build_video_unet::<f64>(&cfg, seed, seed + 1).unwrap();
        let v = random_clips(&cfg, 1, seed + 2);
        let text = tokens(&cfg, 1, seed);
        let video = forward_video(&p, &cfg, &v, &[t], &text, false).unwrap();
        let folded = vsr_core::fold_frames(&v);
        let images = forward_image(&p, &cfg, &folded, &[t, t], &text.repeat_rows(2)).unwrap();
        let back = vsr_core::unfold_frames(&images, 2).unwrap();
        prop_assert_eq!(back, video);
    }
}

#[test]
fn clip_shape_is_preserved_for_eight_frames() {
    let cfg = ModelConfig {
        frames: 8,
        ..tiny()
    };
    let p = build_video_unet::<f32>(&cfg, 0, 0).unwrap();
    let v = VideoBatch::new(Array5::<f32>::zeros((1, 8, 6, 16, 16))).unwrap();
    let y = forward_video(&p, &cfg, &v, &[3], &tokens(&cfg, 1, 0), true).unwrap();
    assert_eq!(y.dim(), (1, 8, 3, 16, 16));
}
