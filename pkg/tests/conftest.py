import json
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

DATA_DIR = Path(__file__).parent / "data"


@pytest.fixture
def rng():
    return np.random.default_rng(20240917)


def golden_image() -> np.ndarray:
    """The canonical two-rectangle document used by the golden run."""
    img = np.zeros((64, 64), np.uint8)
    img[6:14, 6:22] = 80
    img[40:50, 6:26] = 160
    return img


def golden_scenario(tmp_path, n_images: int = 3):
    """Build the golden end-to-end fixture: a mock det+recog config plus
    ``n_images`` copies of the two-rectangle document.  Returns
    (config_path, image_paths, output_path)."""
    from PIL import Image

    image_paths = []
    for i in range(n_images):
        path = tmp_path / f"doc{i}.png"
        Image.fromarray(golden_image()).save(path)
        image_paths.append(str(path))
    dict_path = tmp_path / "dict.txt"
    dict_path.write_text("a\nb\nc\nd\n", encoding="utf-8")
    # Scripted texts keyed on the diluted mean gray of each unclipped crop:
    # rect1 fill 80 spread over a 24x16 crop, rect2 fill 160 over 30x20.
    m1 = round(16 * 8 * 80 / (24 * 16) / 255, 4)
    m2 = round(20 * 10 * 160 / (30 * 20) / 255, 4)
    config = {
        "version": 1,
        "stages": {
            "detector": {
                "algorithm": "db",
                "model": {
                    "type": "mock",
                    "scene": {
                        "kind": "detector",
                        "rects": [
                            {"x": 6, "y": 6, "w": 16, "h": 8, "p": 0.9},
                            {"x": 6, "y": 40, "w": 20, "h": 10, "p": 0.9},
                        ],
                    },
                },
            },
            "recognizer": {
                "decoder": "ctc_greedy",
                "dict": str(dict_path),
                "model": {
                    "type": "mock",
                    "scene": {
                        "kind": "recognizer",
                        "characters": "abcd",
                        "peak": 0.9,
                        "entries": [{"gray": m1, "text": "ab"}, {"gray": m2, "text": "cd"}],
                    },
                },
            },
        },
        "io": {"input": str(tmp_path / "doc*.png"), "output": str(tmp_path / "results.jsonl")},
        "runtime": {"workers": 1},
    }
    config_path = tmp_path / "golden.json"
    config_path.write_text(json.dumps(config, indent=2), encoding="utf-8")
    return str(config_path), image_paths, str(tmp_path / "results.jsonl")


def random_convex_quad(rng, center_span: float = 60.0, radius: tuple[float, float] = (3.0, 18.0)):
    """A random convex quadrilateral: four angle-sorted points on an ellipse."""
    cx, cy = rng.uniform(10, center_span, size=2)
    a, b = rng.uniform(*radius, size=2)
    angles = np.sort(rng.uniform(0, 2 * np.pi, size=4))
    # Re-draw until no two angles are nearly equal (degenerate side).
    while np.min(np.diff(np.append(angles, angles[0] + 2 * np.pi))) < 0.3:
        angles = np.sort(rng.uniform(0, 2 * np.pi, size=4))
    return np.stack([cx + a * np.cos(angles), cy + b * np.sin(angles)], axis=1)
