"""Walk through the blockage use case offline, one stage at a time.

Run with ``python3 demos/blockage_walkthrough.py``. Nothing here opens a
socket: the scene, the CVF engine, the radio model and the fusion step are
called directly so each intermediate result can be looked at.
"""

import numpy as np

from visric import wire
from visric.agent import event_to_payload
from visric.cvf import CvfConfig, run_engine
from visric.radio import RadioConfig, RadioModel
from visric.scene import canonical_scene, ground_truth_blocked, iter_frames
from visric.xapp import detect_transitions, fuse, phase_means

# %% the scene
# one obstacle walks down onto the gNB-UE line, rests on it, then walks away
scene = canonical_scene()
frames = list(iter_frames(scene, 50))
print("gNB", scene.gnb_pos, "UE marker", scene.ue_marker_box)
for k in (0, 10, 16, 30, 45):
    f = frames[k]
    print(f"frame {k:2d} t={f.time_s:.1f}s obstacle at {f.detections[0].box.center}",
          "marker hidden" if f.ue_marker is None else "")

blocked = [k for k in range(50) if ground_truth_blocked(scene, k)[scene.ue_id]]
print("ground truth blocked frames:", blocked[0], "to", blocked[-1])

# %% CVF events
events = run_engine(CvfConfig(), scene, frames)
word = "".join({"PriorBlockage": "P", "Blockage": "B", "PostBlockage": "O"}[e.kind.value] for e in events)
print(word)  # P then B then exactly three O
for e in events:
    if e.kind.value == "PriorBlockage":
        print("prior at frame", e.frame_index, "time to block", e.time_to_block_ms, "ms")

# the LoS-only target predicts later, because the box meets the UE box before the segment
late = run_engine(CvfConfig(prior_target="los"), scene, frames)
print("LoS-only priors:", [e.frame_index for e in late if e.kind.value == "PriorBlockage"])

# %% radio
radio = RadioModel(RadioConfig(rng_seed=7), scene)
samples = np.array(list(radio.samples(10.0)))
t_s, snr_db = samples[:, 0] / 1e9, samples[:, 1] / 100
in_block = (t_s >= 3.2) & (t_s <= 8.8)
print(f"SNR clear {snr_db[~in_block].mean():.2f} dB, blocked {snr_db[in_block].mean():.2f} dB")

# %% fusion, as the xApp would see it (receive order = scene order here)
indications = []
for i, (t, snr) in enumerate(samples.tolist()):
    indications.append((int(t), wire.indication(200, i + 1, int(t), wire.SnrReport(1, int(snr), int(t)))))
for i, e in enumerate(events):
    t = e.frame_index * 200_000_000
    indications.append((t, wire.indication(100, i + 1, t, event_to_payload(e, scene.ue_id))))
indications.sort(key=lambda x: x[0])

timeline = fuse(indications)
print(timeline.to_csv().splitlines()[14:20])
print(detect_transitions(timeline))
print({k: round(v, 2) for k, v in phase_means(timeline).items()})
