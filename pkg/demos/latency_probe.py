"""Measure one latency cell and look at the delay distribution.

Starts a broker, a measurement xApp and two load agents as separate
processes, exactly like ``visric bench``; takes a few seconds.
"""

import numpy as np

from visric.bench import Cell, run_repetition, summarize

# %% one repetition, rows kept
r = run_repetition(Cell(agents=2, size_bytes=16, rate_per_agent=1000), duration_s=2.0)
print("sent", r.sent, "received", r.received, "fifo", r.fifo_ok, "audit", r.audit or "clean")
print(r.stats)

# %% where the tail comes from
d_us = (r.rows[:, 3] - r.rows[:, 2]) / 1e3
print("percentiles us:", {p: round(float(np.percentile(d_us, p)), 1) for p in (50, 90, 99, 99.9)})
hist, edges = np.histogram(d_us, bins=[0, 50, 100, 200, 500, 1000, 5000, np.inf])
for lo, hi, n in zip(edges[:-1], edges[1:], hist):
    print(f"{lo:>6.0f}-{hi:<6.0f} us {n}")

# %% per-agent view
for aid in np.unique(r.rows[:, 0]):
    sel = r.rows[r.rows[:, 0] == aid]
    print("agent", aid, summarize(sel[:, 3] - sel[:, 2]).mean_ms, "ms mean")

# send-side jitter is reported by each agent
for s in r.send_reports:
    print("agent", s.agent_id, "rate", round(s.achieved_rate, 1), "p99 jitter us", s.p99_send_jitter_ns / 1e3)
