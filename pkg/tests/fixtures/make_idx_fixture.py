"""Builds the golden 3-image IDX fixture byte by byte from the format layout.

Images are 28x28 with pixel (i, r, c) = (37*i + 11*r + 3*c) % 256 and labels
[5, 0, 4]. Run from this directory to refresh the binary files; the test
recomputes the expected matrix from the same formula, independent of the
parser under test.
"""

import struct

ROWS = COLS = 28
LABELS = [5, 0, 4]


def build():
    images = bytearray(struct.pack(">IIII", 0x00000803, len(LABELS), ROWS, COLS))
    for i in range(len(LABELS)):
        for r in range(ROWS):
            for c in range(COLS):
                images.append((37 * i + 11 * r + 3 * c) % 256)
    labels = bytearray(struct.pack(">II", 0x00000801, len(LABELS)))
    labels.extend(LABELS)
    return bytes(images), bytes(labels)


if __name__ == "__main__":
    import os
    here = os.path.dirname(os.path.abspath(__file__))
    images, labels = build()
    with open(os.path.join(here, "golden-images-idx3-ubyte"), "wb") as fh:
        fh.write(images)
    with open(os.path.join(here, "golden-labels-idx1-ubyte"), "wb") as fh:
        fh.write(labels)
    print(f"wrote {len(images)} + {len(labels)} bytes")
