use std::time::{Duration, Instant};

use hdmae::masking::random_mask;
use hdmae::model::{self, init_params, PositionTables};
use hdmae::patch::patchify;
use hdmae::{phantom, rng, PatchConfig, Tape, ViTConfig};

fn encode_time(cfg: &ViTConfig, ratio: Option<f64>) -> Duration {
    let params = init_params::<f32>(cfg, 0).unwrap();
    let pos = PositionTables::<f32>::new(cfg).unwrap();
    let img = phantom::synth_phantom(0, &cfg.patch, false).unwrap().image;
    let n = cfg.patch.num_tokens();
    let tokens: Vec<usize> = match ratio {
        Some(r) => random_mask(n, r, &mut rng::from_seed(1)).unwrap().visible().to_vec(),
        None => (0..n).collect(),
    };
    (0..5)
        .map(|_| {
            let start = Instant::now();
            let mut tape = Tape::no_grad();
            let vars = model::bind(&mut tape, &params, false);
            let patches = tape.constant(patchify(&img, &cfg.patch).unwrap());
            let enc_pos = tape.constant_ref(&pos.enc);
            let out = model::encode_tokens(&mut tape, &vars, cfg, patches, enc_pos, &tokens).unwrap();
            assert_eq!(tape.shape(out), &[tokens.len(), cfg.enc_dim()]);
            start.elapsed()
        })
        .min()
        .unwrap()
}

#[test]
fn encoder_cost_follows_visible_tokens() {
    let cfg = ViTConfig {
        patch: PatchConfig {
            image_side: 128,
            patch_side: 8,
            embed_dim: 64,
        },
        enc_depth: 2,
        enc_heads: 4,
        dec_dim: 32,
        dec_depth: 1,
        dec_heads: 4,
        mlp_ratio: 4,
    };
    assert_eq!(cfg.patch.num_tokens(), 256);
    let full = encode_time(&cfg, None);
    let masked = encode_time(&cfg, Some(0.75));
    let factor = full.as_secs_f64() / masked.as_secs_f64();
    assert!(factor > 1.5, "full {full:?} vs masked {masked:?} (factor {factor:.2})");
}
