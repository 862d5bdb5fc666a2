from pathlib import Path

import numpy as np
import pytest
import torch
from PIL import Image

torch.set_num_threads(1)

# acceptance criterion number -> (title, [(test name, passed)])
_CRITERIA: dict[int, tuple[str, list[tuple[str, bool]]]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        number, title = marker.args
        _CRITERIA.setdefault(number, (title, []))[1].append((item.name, rep.passed))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, results = _CRITERIA[number]
        ok = all(passed for _, passed in results)
        failed = [name for name, passed in results if not passed]
        detail = f" (failed: {', '.join(failed)})" if failed else ""
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'} - {title}{detail}")


def central_diff(f, x: torch.Tensor, eps: float = 1e-5, n_coords: int | None = None, rng=None) -> tuple[np.ndarray, np.ndarray]:
    """Central finite differences of scalar ``f()`` w.r.t. entries of ``x`` (modified in place).

    Returns (flat indices, numeric derivatives). With ``n_coords`` only a
    random subset of coordinates is probed.
    """
    flat = x.data.view(-1)
    if n_coords is None or n_coords >= flat.numel():
        idx = np.arange(flat.numel())
    else:
        rng = rng or np.random.default_rng(0)
        idx = rng.choice(flat.numel(), size=n_coords, replace=False)
    out = np.empty(len(idx))
    with torch.no_grad():
        for k, i in enumerate(idx):
            orig = flat[i].item()
            flat[i] = orig + eps
            fp = float(f())
            flat[i] = orig - eps
            fm = float(f())
            flat[i] = orig
            out[k] = (fp - fm) / (2 * eps)
    return idx, out


def rel_err(analytic, numeric) -> float:
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    scale = max(np.linalg.norm(a), np.linalg.norm(n), 1e-12)
    return float(np.linalg.norm(a - n) / scale)


def grad_rel_err(f, x: torch.Tensor, eps: float = 1e-5, n_coords: int | None = None, rng=None) -> float:
    """Relative error between autograd and central differences of scalar ``f()`` w.r.t. ``x``."""
    x.grad = None
    loss = f()
    (g,) = torch.autograd.grad(loss, x)
    idx, num = central_diff(f, x, eps, n_coords, rng)
    return rel_err(g.detach().reshape(-1).numpy()[idx], num)


def write_cub_fixture(root: Path, n_images: int = 4, size: int = 120) -> Path:
    """A tiny CUB-format tree: ``n_images`` images, 3 parts, 6 attributes (5 mapped)."""
    rng = np.random.default_rng(3)
    (root / "images" / "001.Black_footed_Albatross").mkdir(parents=True)
    (root / "images" / "002.Laysan_Albatross").mkdir(parents=True)
    (root / "parts").mkdir()
    (root / "attributes").mkdir()
    images, boxes, split, locs, labels = [], [], [], [], []
    for i in range(1, n_images + 1):
        folder = "001.Black_footed_Albatross" if i % 2 else "002.Laysan_Albatross"
        rel = f"{folder}/img_{i:03d}.jpg"
        pix = rng.integers(0, 256, size=(size, size, 3), dtype=np.uint8)
        Image.fromarray(pix).save(root / "images" / rel, format="PNG")
        images.append(f"{i} {rel}")
        boxes.append(f"{i} {10.0 + i} {12.0} {80.0} {90.0 - i}")
        split.append(f"{i} {i % 2}")
        locs.append(f"{i} 1 {30.0 + i} {40.0} 1")
        if i == 1:
            locs.append("1 2 60.5 90.0 1")
        else:
            locs.append(f"{i} 2 {50.0} {70.5 + i} 1")
        # part 3 of image 2 is not visible
        locs.append("2 3 0 0 0" if i == 2 else f"{i} 3 {45.0} {55.0} 1")
        for a in range(1, 7):
            present = int((a + i) % 2 == 0)
            if i == 1 and a == 5:
                labels.append("1 5 1 3 10.2")
            else:
                labels.append(f"{i} {a} {present} 3 1.0")
    (root / "images.txt").write_text("\n".join(images) + "\n")
    (root / "bounding_boxes.txt").write_text("\n".join(boxes) + "\n")
    (root / "train_test_split.txt").write_text("\n".join(split) + "\n")
    (root / "parts" / "part_locs.txt").write_text("\n".join(locs) + "\n")
    (root / "parts" / "parts.txt").write_text("1 back\n2 beak\n3 belly\n")
    (root / "attributes" / "image_attribute_labels.txt").write_text("\n".join(labels) + "\n")
    (root / "attributes" / "attribute_part_map.txt").write_text("1 1\n2 1\n3 2\n5 2\n6 3\n")
    return root


@pytest.fixture
def cub_root(tmp_path):
    return write_cub_fixture(tmp_path / "cub")
