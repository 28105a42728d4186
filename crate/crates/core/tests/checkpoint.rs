use mgcd::io::checkpoint::{from_bytes, to_bytes};
use mgcd::io::{load_checkpoint, save_checkpoint};
use mgcd::textures::{generate, TextureKind};
use mgcd::trainer::{Method, TrainConfig, TrainState};

fn tiny(method: Method) -> (TrainConfig, mgcd::Tensor<f32>) {
    let config = TrainConfig {
        method,
        batch_size: 4,
        iterations: 2,
        learning_rate: 1e-3,
        langevin_steps: 3,
        single_grid_steps: 6,
        grids: 2,
        scale_factor: 2,
        channels: 1,
        channel_scale: 0.125,
        seed: 5,
        ..TrainConfig::default()
    };
    let data = generate(TextureKind::Stripes, 10, 1, 4, 3).unwrap().images;
    (config, data)
}

#[test]
fn bytes_round_trip_is_exact() {
    for method in [Method::Multigrid, Method::Singlegrid, Method::Cd1, Method::Persistent] {
        let (config, data) = tiny(method);
        let mut state = TrainState::new(config, &data).unwrap();
        state.step(&data).unwrap();
        let bytes = to_bytes(&state);
        let back = from_bytes(&bytes).unwrap();
        assert_eq!(back, state, "{method}");
        assert_eq!(to_bytes(&back), bytes, "{method}");
    }
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let (config, data) = tiny(Method::Multigrid);
    let mut a = TrainState::new(config, &data).unwrap();
    a.step(&data).unwrap();
    let mut b = from_bytes(&to_bytes(&a)).unwrap();
    a.step(&data).unwrap();
    b.step(&data).unwrap();
    assert_eq!(to_bytes(&a), to_bytes(&b));
}

#[test]
fn file_round_trip() {
    let (config, data) = tiny(Method::Multigrid);
    let mut state = TrainState::new(config, &data).unwrap();
    state.step(&data).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.mgcd");
    save_checkpoint(&state, &path).unwrap();
    assert_eq!(load_checkpoint(&path).unwrap(), state);
}

#[test]
fn corrupt_input_is_rejected() {
    let (config, data) = tiny(Method::Cd1);
    let state = TrainState::new(config, &data).unwrap();
    let bytes = to_bytes(&state);
    assert!(from_bytes(&bytes[..bytes.len() - 1]).is_err());
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(from_bytes(&extra).is_err());
    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(from_bytes(&magic).is_err());
    assert!(from_bytes(&[]).is_err());
}
