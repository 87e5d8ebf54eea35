"""A short tour of the binary framing: what goes on the socket and back."""

from visric import wire
from visric.geometry import Box2D

# %% one Blockage indication
p = wire.Blockage(obstacle_id=1, box=Box2D(10.0, 0.5, 0.5, 0.5), frame_index=16, ue_id=1)
env = wire.indication(agent_id=100, seq=17, send_timestamp_ns=3_200_000_000, payload=p)
frame = wire.encode(env)
print(len(frame), "bytes")
print(frame[:28].hex(" "))  # header: magic, version, type, agent, seq, timestamp, length
print(frame[28:].hex(" "))  # body: kind tag then the fields

back = wire.decode(frame)
assert back == env and wire.decode_sensing(back.payload) == p

# %% synthetic pads size the load messages
for n in (0, 16, 1024):
    print(n, "pad bytes ->", wire.pad_wire_size(n), "on the wire")

# %% a stream arrives in arbitrary pieces; the decoder reassembles it
stream = b"".join(wire.encode(wire.indication(1, s, 0, wire.SnrReport(1, 2800 - s, s))) for s in range(1, 6))
dec = wire.FrameDecoder()
got = []
for i in range(0, len(stream), 7):
    got += dec.feed(stream[i:i + 7])
print([wire.decode_sensing(e.payload).snr_centi_db for e in got])

# %% errors are typed
for bad in (b"\x00" * 28, frame[:10]):
    try:
        wire.decode(bad)
    except wire.WireError as exc:
        print(type(exc).__name__, exc)
