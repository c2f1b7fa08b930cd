"""Train the perception stack at reduced size, then detect and track.

Uses 120 training scenes and 6 epochs so it finishes in under a minute;
the full-size run lives in ``python -m deskdrive train-perception``.

    python demos/detect_and_track.py
"""

import dataclasses

import numpy as np

from deskdrive.perception import (CLASS_NAMES, PerceptionConfig, Tracker, evaluate_detector, generate_scene,
                                  generate_sequence, train_perception)

cfg = PerceptionConfig(train_scenes=120, train=dataclasses.replace(PerceptionConfig().train, epochs=6))
model = train_perception(cfg, np.random.default_rng(0))
print(f"training loss {model.history.total[0]:.3f} -> {model.history.total[-1]:.3f}")

scenes = [generate_scene(s) for s in range(1000, 1200)]
for name, det in (("two-stage (SVM)", model.two_stage(cfg)), ("multi-task", model.multitask(cfg))):
    rep = evaluate_detector(det, scenes)
    print(f"{name:16s} accuracy {rep.accuracy:.3f} precision {rep.precision:.3f} "
          f"median frame {np.median(rep.frame_ms):.1f} ms")

scene = scenes[0]
print("scene 1000 ground truth:", [(CLASS_NAMES[a.class_id], a.box) for a in scene.annotations])
for d in model.two_stage(cfg).detect(scene):
    print(f"  detected {CLASS_NAMES[d.class_id]} at {tuple(round(v, 1) for v in d.box)} score {d.score:.2f}")

seq = generate_sequence(5, n_frames=10)
tracker = Tracker(model.multitask(cfg))
for t, frame in enumerate(seq.frames):
    tracks = tracker.step(frame)
    print(f"frame {t}: " + ", ".join(f"#{s.track_id} {CLASS_NAMES[s.box.class_id]}" for s in tracks))
