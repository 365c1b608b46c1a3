use spe_core::engine::{self, EngineParams, SimConfig};

#[test]
fn reference_paths_stay_below_top_bin() {
    let params = EngineParams::reference();
    let data = engine::simulate(&params, &SimConfig::new(500, 100, 20240601), 101, 1e-9).unwrap();
    let max = data.iter().flat_map(|h| &h.obs).copied().max().unwrap();
    assert!(max < params.z_max - 1, "mileage reached bin {max} of {}", params.z_max);
}

#[test]
fn real_data_loader_needs_the_file() {
    let err = engine::load_real_data(std::path::Path::new("no/such/bus-data.jsonl")).unwrap_err();
    assert!(matches!(err, spe_core::Error::DataUnavailable(_)), "{err}");
}
