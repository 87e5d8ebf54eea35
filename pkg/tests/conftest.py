import numpy as np
import pytest
from hypothesis import strategies as st

from visric import wire
from visric.geometry import Box2D

U32 = st.integers(0, 2**32 - 1)
U64 = st.integers(0, 2**64 - 1)
finite = st.floats(allow_nan=False, allow_infinity=False, width=64)
positive = st.floats(min_value=1e-300, max_value=1e300, allow_nan=False, allow_infinity=False)

boxes = st.builds(Box2D, finite, finite, positive, positive)

payloads = {
    wire.PayloadKind.PRIOR_BLOCKAGE: st.builds(wire.PriorBlockage, U32, boxes, st.integers(1, 2**32 - 1), U64, U32),
    wire.PayloadKind.BLOCKAGE: st.builds(wire.Blockage, U32, boxes, U64, U32),
    wire.PayloadKind.POST_BLOCKAGE: st.builds(wire.PostBlockage, U32, U64, U32),
    wire.PayloadKind.SNR_REPORT: st.builds(wire.SnrReport, U32, st.integers(-2**31, 2**31 - 1), U64),
    wire.PayloadKind.SYNTHETIC_PAD: st.builds(wire.SyntheticPad, st.binary(max_size=2048)),
}


def random_payload(kind, rng: np.random.Generator):
    """Uniformly random payload of one kind drawn with numpy (fast path for 10^4-case sweeps)."""
    def u32():
        return int(rng.integers(0, 2**32, dtype=np.uint64))

    def u64():
        return int(rng.integers(0, 2**63, dtype=np.int64)) * 2 + int(rng.integers(0, 2))

    def box():
        # random bit patterns reinterpreted as f64, rejecting non-finite ones
        while True:
            raw = rng.integers(0, 2**63, size=4, dtype=np.int64).view(np.float64)
            cx, cy, hx, hy = (float(v) for v in raw)
            hx, hy = abs(hx), abs(hy)
            if all(np.isfinite([cx, cy, hx, hy])) and hx > 0 and hy > 0:
                return Box2D(-cx if rng.integers(2) else cx, cy, hx, hy)

    if kind == wire.PayloadKind.PRIOR_BLOCKAGE:
        return wire.PriorBlockage(u32(), box(), max(1, u32()), u64(), u32())
    if kind == wire.PayloadKind.BLOCKAGE:
        return wire.Blockage(u32(), box(), u64(), u32())
    if kind == wire.PayloadKind.POST_BLOCKAGE:
        return wire.PostBlockage(u32(), u64(), u32())
    if kind == wire.PayloadKind.SNR_REPORT:
        return wire.SnrReport(u32(), int(rng.integers(-2**31, 2**31)), u64())
    n = int(rng.integers(0, 2049))
    return wire.SyntheticPad(rng.bytes(n))


def random_envelope(kind, rng):
    p = random_payload(kind, rng)
    return wire.indication(int(rng.integers(0, 2**32)), int(rng.integers(0, 2**63)),
                           int(rng.integers(0, 2**63)), p), p


@pytest.fixture
def broker():
    from visric.broker import BrokerThread
    with BrokerThread() as b:
        yield b


# --------------------------------------------------------------------------- acceptance report

#: (criterion number, passed, one-line detail) in run order
ACCEPTANCE_RESULTS: list[tuple[int, bool, str]] = []


def record_criterion(n: int, passed: bool, detail: str) -> None:
    ACCEPTANCE_RESULTS.append((n, bool(passed), detail))
    print(f"criterion {n}: {'PASS' if passed else 'FAIL'} {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n, ok, detail in sorted(ACCEPTANCE_RESULTS):
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
