mod common;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::{brute_force_render, random_splat_input, relative_error};
use wrfgs::projection::Canvas;
use wrfgs::splat::{render, Compositor};

fn check(seed: u64, n: usize, canvas: Canvas, compositor: Compositor, early_exit: bool) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let input = random_splat_input(&mut rng, n, canvas, compositor, early_exit);
    let tiled = render(&input).unwrap();
    let reference = brute_force_render(&input);
    let err = relative_error(&tiled.complex_field, &reference);
    assert!(err <= 1e-6, "seed {seed} {compositor:?}: relative error {err:e}");
}

#[test]
fn tiled_matches_brute_force_chained() {
    for seed in 0..6 {
        check(seed, 80 + 40 * seed as usize, Canvas::SPECTRUM, Compositor::ChainedAttenuation, false);
    }
}

#[test]
fn tiled_matches_brute_force_alpha() {
    for seed in 0..6 {
        check(100 + seed, 80 + 40 * seed as usize, Canvas::SPECTRUM, Compositor::AlphaBlend, false);
    }
}

#[test]
fn tiled_matches_brute_force_with_early_exit() {
    for seed in 0..4 {
        check(200 + seed, 300, Canvas::SPECTRUM, Compositor::AlphaBlend, true);
    }
}

#[test]
fn odd_canvas_with_partial_tiles() {
    for (i, compositor) in [Compositor::ChainedAttenuation, Compositor::AlphaBlend].into_iter().enumerate() {
        check(300 + i as u64, 60, Canvas::new(37, 101), compositor, false);
    }
}
