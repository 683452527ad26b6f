"""Baseline rectification walkthrough.

Renders a text line on a sinusoidal baseline, then flattens it with the
rectifying cropper: every output column samples the page along the local
baseline normal, covering the ascender extent above and the descender
extent below, and the result is resampled to a fixed 50-pixel height.

Run:  python demos/01_line_rectification.py [--show]
"""

import argparse

import numpy as np

from scriptorium.geometry import rectify_and_crop
from scriptorium.synth import render_line_block


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--show", action="store_true",
                        help="display with matplotlib instead of printing stats")
    args = parser.parse_args()

    text = "abdegnorsñ" * 2
    band_width = len(text) * 6 * 3
    curve = 10.0 * np.sin(2 * np.pi * np.arange(band_width) / 200.0)
    page, geom = render_line_block(text, scale=3, margin=30, curve=curve)
    print(f"page: {page.shape}, baseline vertices: {len(geom.baseline.points)}, "
          f"arc length: {geom.baseline.arc_length:.1f} px")

    crop = rectify_and_crop(page, geom, target_height=50, line_scale=1.0,
                            interp_order=2)
    print(f"rectified crop: {crop.pixels.shape} (height pinned to 50)")

    # flatness check: per-column ink centroid spread. Glyph shapes give
    # even a straight line some natural spread, so compare the rectified
    # crop against a straight rendering of the same text.
    def centroid_std(img):
        ink = 1.0 - img
        cols = ink.sum(axis=0)
        mask = cols > 0.5 * np.median(cols[cols > 1e-3])
        rows = np.arange(img.shape[0])
        cent = (ink[:, mask] * rows[:, None]).sum(axis=0) / ink[:, mask].sum(axis=0)
        return float(cent.std())

    straight_page, straight_geom = render_line_block(text, scale=3, margin=30)
    straight = rectify_and_crop(straight_page, straight_geom, target_height=50,
                                interp_order=2)
    print(f"ink-centroid std: curved input {centroid_std(page):.2f} px, "
          f"rectified {centroid_std(crop.pixels):.2f} px, "
          f"straight reference {centroid_std(straight.pixels):.2f} px")

    if args.show:
        import matplotlib.pyplot as plt

        fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(10, 5))
        ax1.imshow(page, cmap="gray")
        xs = [p.x for p in geom.baseline.points]
        ys = [p.y for p in geom.baseline.points]
        ax1.plot(xs, ys, "r-", lw=1)
        ax1.set_title("curved input with predicted baseline")
        ax2.imshow(crop.pixels, cmap="gray")
        ax2.set_title("rectified 50 px line")
        plt.tight_layout()
        plt.show()


if __name__ == "__main__":
    main()
