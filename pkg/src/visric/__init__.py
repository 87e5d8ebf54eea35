"""visric: a small RAN intelligent controller simulator in which camera-side
obstacle tracking and radio SNR reports meet in one xApp.

Modules: wire (binary protocol), broker, agent, scene, cvf, radio, xapp,
bench, usecase, cli.
"""

__version__ = "0.1.0"
