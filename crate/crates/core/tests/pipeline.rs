use emgleam::dataset::{CaptureChain, SessionConditions};
use emgleam::emanator::{capture_clean, emanate, finish, ChannelModel};
use emgleam::profile::profile;
use emgleam::raster::{MessageLayout, Renderer};
use emgleam::receiver::{am_demod, estimate_frame_rate, reconstruct, ReconParams};
use emgleam::Exec;

const SEQ: Exec = Exec::Sequential;

#[test]
fn sparse_message_screen_syncs_to_the_frame_lag() {
    let p = profile("iphone6s").unwrap();
    let raster = Renderer::default()
        .security_message("109662", p.timing.visible(), p.cell)
        .unwrap();
    for seed in [5, 99] {
        let cond = SessionConditions::varied(&p, seed).with_snr(Some(25.0));
        let chain = CaptureChain::new(p.clone(), cond, SEQ);
        let clean = chain.capture_clean(&raster).unwrap();
        let rec = finish(&clean, &chain.conditions.channel(seed), SEQ).unwrap();
        let mag = am_demod(&rec, 1.0).unwrap();
        let f = estimate_frame_rate(&mag, rec.sample_rate_hz, p.timing.f_r, 1000.0).unwrap();
        assert!((f / p.timing.f_r - 1.0).abs() < 1e-5, "seed {seed}: {f} Hz");
    }
}

#[test]
fn code_region_keeps_its_glyphs_after_a_session_capture() {
    let p = profile("iphone6s").unwrap();
    let screen = p.timing.visible();
    let raster = Renderer::default().security_message("888888", screen, p.cell).unwrap();
    let cond = SessionConditions::varied(&p, 3).with_snr(Some(25.0));
    let mut chain = CaptureChain::new(p.clone(), cond, SEQ);
    let emage = chain.capture(&raster, 11).unwrap();
    let (sx, sy, sw, sh) = MessageLayout::for_screen(screen, p.cell).unwrap().code_region();
    let (x, y, w, h) = p.screen_to_emage(sx, sy, sw, sh);
    let code = emage.crop(x, y, w, h).unwrap();
    let above = emage.crop(x, y - h, w, h).unwrap();
    let mean = |v: &[f32]| v.iter().sum::<f32>() / v.len() as f32;
    assert!(mean(&code) > 2.0 * mean(&above), "{} vs {}", mean(&code), mean(&above));
}

#[test]
fn noiseless_chain_is_deterministic_and_complete() {
    let p = profile("galaxy_a3").unwrap();
    let raster = Renderer::default()
        .security_message("123456", p.timing.visible(), p.cell)
        .unwrap();
    let run = || {
        let leak = emanate(&raster, &p.timing, &p.leak, 2).unwrap();
        let clean = capture_clean(&leak, &p.frontend(), SEQ).unwrap();
        let rec = finish(&clean, &ChannelModel::noiseless(), SEQ).unwrap();
        reconstruct(&rec, &ReconParams::new(p.emage.width, p.emage.height, p.timing.f_r), SEQ).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.pixels, b.pixels);
    assert_eq!(a.frames_averaged, 2);
    assert!(a.pixels.iter().all(|v| (0.0..=1.0).contains(v)));
}

#[cfg(feature = "parallel")]
#[test]
fn parallel_and_sequential_reconstructions_match() {
    let p = profile("galaxy_a3").unwrap();
    let raster = Renderer::default()
        .security_message("654321", p.timing.visible(), p.cell)
        .unwrap();
    let leak = emanate(&raster, &p.timing, &p.leak, 2).unwrap();
    let run = |exec: Exec| {
        let clean = capture_clean(&leak, &p.frontend(), exec).unwrap();
        let rec = finish(&clean, &ChannelModel::with_snr(20.0, 4), exec).unwrap();
        reconstruct(&rec, &ReconParams::new(p.emage.width, p.emage.height, p.timing.f_r), exec).unwrap()
    };
    assert_eq!(run(Exec::Sequential).pixels, run(Exec::Parallel).pixels);
}

#[test]
fn dense_and_sparse_screens_align_alike() {
    for name in ["iphone6s", "galaxy_a3"] {
        let p = profile(name).unwrap();
        let r = Renderer::default();
        let (rows, cols) = (emgleam::profile::GRID_ROWS, emgleam::profile::GRID_COLS);
        let digits: Vec<char> = (0..rows * cols).map(|i| char::from(b'0' + ((i * 7 + i / cols) % 10) as u8)).collect();
        let grid = r.digit_grid(rows, cols, &digits, p.grid_area(rows, cols)).unwrap();
        let message = r.security_message("314159", p.timing.visible(), p.cell).unwrap();
        for seed in [1, 2, 3] {
            let cond = SessionConditions::varied(&p, seed).with_snr(Some(25.0));
            let mut chain = CaptureChain::new(p.clone(), cond, SEQ);
            let a = chain.capture(&grid, seed).unwrap().alignment_offset;
            let b = chain.capture(&message, seed + 10).unwrap().alignment_offset;
            assert_eq!(a, b, "{name} seed {seed}");
        }
    }
}
