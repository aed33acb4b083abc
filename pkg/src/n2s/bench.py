"""Render latency benchmark: one 80x60 frame from a desk-scale field.

Run ``python -m n2s.bench`` (honours ``N2S_THREADS``). Reports the median
wall time over several renders after one warm-up render.
"""

from __future__ import annotations

import argparse
import os
import statistics
import time

import numpy as np
import torch

from .field import RadianceField, desk_field_config
from .ingest import CameraIntrinsics, Pose
from .render import desk_render_config, render_image

BUDGET_MS = 250.0


def benchmark_render(repeats: int = 5, width: int = 80, height: int = 60, seed: int = 0) -> dict:
    field = RadianceField(desk_field_config(), seed=seed)
    config = desk_render_config()
    camera = CameraIntrinsics(width, height, 0.9 * width, 0.9 * width, width / 2, height / 2)
    pose = Pose.from_matrix(np.eye(3), (0.0, 0.0, 0.0))
    render_image(field, camera, pose, config)  # warm-up: JIT compilation and allocator
    times = []
    for _ in range(repeats):
        start = time.perf_counter()
        render_image(field, camera, pose, config)
        times.append(1000 * (time.perf_counter() - start))
    return {
        "median_ms": statistics.median(times),
        "min_ms": min(times),
        "times_ms": times,
        "threads": torch.get_num_threads(),
        "cpus": os.cpu_count(),
        "samples": (config.proposal_samples, config.samples),
        "resolution": (width, height),
    }


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=5)
    args = parser.parse_args(argv)
    threads = os.environ.get("N2S_THREADS")
    if threads:
        torch.set_num_threads(int(threads))
    r = benchmark_render(args.repeats)
    verdict = "within" if r["median_ms"] <= BUDGET_MS else "over"
    print(f"render {r['resolution'][0]}x{r['resolution'][1]} @ {r['samples'][0]}x{r['samples'][1]} samples: "
          f"median {r['median_ms']:.1f} ms, min {r['min_ms']:.1f} ms on {r['threads']} threads "
          f"({verdict} the {BUDGET_MS:.0f} ms budget)")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
