"""Spot a lightly altered secret inside an outbound buffer with the two-stage scanner.

Run: python demos/04_taint_inference.py
"""

from __future__ import annotations

import os

from rvtee import SensitivePattern, TaintConfig, coarse_scan, fine_match, scan
from rvtee.taint import permissive_threshold

SECRET = SensitivePattern("session-key", b"k3y:7f2a9c01e4b8")


def main():
    leaked = b"k3y-7f2a9c01e4b8"  # one substitution, as a sloppy re-encoding might produce
    buffer = os.urandom(1500) + b"POST /upload token=" + leaked + b"&x=1" + os.urandom(2500)

    for k in (0, 1, 2):
        cfg = TaintConfig(max_edit_distance=k, coarse_threshold=permissive_threshold(SECRET.data, k, 4))
        windows = coarse_scan(buffer, SECRET, cfg)
        matches = scan(buffer, [SECRET], cfg)
        print(f"k={k}: threshold {cfg.coarse_threshold:.2f}, {len(windows)} candidate windows, matches: "
              + (", ".join(f"@{m.buffer_offset} len {m.span_length} dist {m.edit_distance}" for m in matches)
                 or "none"))

    print("\nfine_match on the framing alone:", fine_match(b"token=" + leaked + b"&", SECRET, 2))


if __name__ == "__main__":
    main()
