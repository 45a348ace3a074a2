"""Regenerate the golden files under tests/fixtures from the current implementation.

Only run this after a change that is meant to alter simulator or CLI output;
the golden files pin behaviour that was checked by hand when first recorded.
"""

import json
import subprocess
import sys
from pathlib import Path

from uoi.grouping import Detection, postprocess_uoi
from uoi.io import format_detections, format_ground_truth
from uoi.simulator import SimConfig, generate_scene, run_experiment

OUT = Path(__file__).resolve().parent.parent / "tests" / "fixtures"


def main():
    OUT.mkdir(parents=True, exist_ok=True)
    scene = generate_scene(SimConfig(rng_seed=42), 0)
    snap = {
        "gts": [[g.class_id, *g.box.as_tuple()] for g in scene.gts],
        "proposals": [[p.class_id, p.score, *p.proposal.as_tuple(), *p.regressed.as_tuple()]
                      for p in scene.proposals],
        "owners": scene.owners,
    }
    (OUT / "scene_seed42.json").write_text(json.dumps(snap, indent=1) + "\n")
    (OUT / "scene_seed42_uoi.jsonl").write_text(format_detections(postprocess_uoi(scene.proposals)))

    report = run_experiment(SimConfig(rng_seed=7, n_scenes=200))
    (OUT / "report_seed7.json").write_text(json.dumps(report.as_dict(), indent=1) + "\n")

    # raw detections with proposals plus ground truth for the CLI fixtures
    scenes = [generate_scene(SimConfig(rng_seed=3), i) for i in range(3)]
    (OUT / "raw_dets.jsonl").write_text(
        "".join(format_detections(
            [Detection(p.regressed, p.score, p.class_id, p.image_id, p.proposal) for p in s.proposals])
            for s in scenes))
    (OUT / "gts.jsonl").write_text("".join(format_ground_truth(s.gts) for s in scenes))
    uoi = [sys.executable, "-m", "uoi.cli"]
    nms = subprocess.run(uoi + ["postprocess", "--method", "nms", "--in", str(OUT / "raw_dets.jsonl")],
                         capture_output=True, text=True, check=True).stdout
    (OUT / "nms_out.jsonl").write_text(nms)
    (OUT / "ablation.conf").write_text(
        "# small ablation config used by the sweep golden test\n"
        "n_scenes = 60\nrng_seed = 7\nproposal_iou_band = 0.5, 0.9\n")
    csv = subprocess.run(uoi + ["sweep", "--config", str(OUT / "ablation.conf"), "--axis", "group-size",
                                "--values", "2,5,8"], capture_output=True, text=True, check=True).stdout
    (OUT / "sweep_group_size.csv").write_text(csv)


if __name__ == "__main__":
    main()
