"""Reconstruct a synthetic scene and report accuracy and timing.

    python scripts/demo_reconstruction.py --config scripts/configs/cluster.ini
"""

import argparse
import logging
import sys

from sparsefusion.config import load_config
from sparsefusion.pipeline import run


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--config", required=True)
    p.add_argument("--frames", type=int)
    p.add_argument("--tracking", choices=("icp", "ground_truth", "icp_with_hook"))
    a = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    cfg = load_config(a.config)
    out = run(cfg, frames=a.frames, tracking=a.tracking)
    s = out.summary
    print(f"status {s['status']} after {s['frames_processed']} frames")
    if "mesh_rms_vox" in s:
        print(f"mesh: {s['mesh_faces']} faces, rms {s['mesh_rms_vox']:.3f} vox, max {s['mesh_max_vox']:.3f} vox")
    if "max_rot_err_deg" in s:
        print(f"worst pose error {s['max_rot_err_deg']:.4f} deg, {s['max_trans_err_vox']:.3f} vox")
    print(f"{s['blocks_allocated']} blocks, {s['memory_bytes'] / 2 ** 20:.1f} MiB")
    shares = {k[6:]: v for k, v in s.items() if k.startswith("share_")}
    if shares:
        print("time: " + ", ".join(f"{k} {v:.0%}" for k, v in shares.items()))
    print(f"outputs in {cfg.output_dir}")
    return 0 if out.ok else 2


if __name__ == "__main__":
    sys.exit(main())
