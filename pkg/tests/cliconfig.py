"""A tiny phantom and run config that take the whole CLI pipeline in seconds."""

import yaml

from liver4d import phantom

CLI_SPEC = dict(
    volume_shape=(21, 16, 16),
    liver_ellipsoid={"center": [0.0, 0.0, 0.0], "semi_axes": [30.0, 11.0, 11.0]},
    vessels=[{"center": [0.0, 0.0, 0.0], "radius": 2.0, "contrast": 0.6}],
)


def write_config(tmp_path, **overrides):
    spec_path = tmp_path / "spec.json"
    phantom.PhantomSpec(**CLI_SPEC).to_json(spec_path)
    cfg = {
        "phantom_spec": str(spec_path),
        "grid_shape": [21, 16, 16],
        "phantom": {"n_offsets": 5, "offset_step_mm": 1.8, "n_pairs": 40, "reference_length": 513},
        "train": {"epochs": 2, "batch_size": 16},
        "model": {"input_shape": [16, 16, 3], "base_filters": 2},
        "evaluation": {"tre_offsets_mm": [1.8, 0.0, -1.8, -3.6], "n_validation": 10,
                       "ablation_fractions": [0.5, 1.0], "patch_radius": 3, "search_radius": 3},
    }
    cfg.update(overrides)
    path = tmp_path / "run.yaml"
    path.write_text(yaml.safe_dump(cfg))
    return path
