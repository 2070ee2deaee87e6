# Events, the double integral and reblur on a generated toy frame.
# Run: python3 demos/01_events_and_edi.py [out_dir]
import sys
import tempfile

import numpy as np

from evsplat.edi import edi_latents, edi_sharp
from evsplat.event_core import integrate_events, rgb_to_gray, warp_intensity
from evsplat.synthdata import generate_dataset, load_dataset

out = sys.argv[1] if len(sys.argv) > 1 else tempfile.mkdtemp(prefix="evsplat_demo_")
ds = load_dataset(generate_dataset(out, seed=3))
print(ds.n_frames, "frames,", len(ds.events), "events,", ds.camera.width, "x", ds.camera.height)


def psnr(a, b):
    return 10 * np.log10(1 / np.mean((a - b) ** 2))


frame = ds.blur_frame(2)
gt = ds.latents(2)
print("blurry vs sharp midpoint  %.2f dB" % psnr(frame.image, gt[4]))

# signed counts over the exposure, then warp the first latent to the last one
t0, t1 = ds.intervals[2]
emap = integrate_events(ds.events, t0, np.nextafter(t1, np.inf))
print("events per pixel in this exposure: max %d, mean %.2f" % (abs(emap.counts).max(), abs(emap.counts).mean()))
pred = warp_intensity(rgb_to_gray(gt[0]), emap, ds.thresholds)
err = np.abs(np.log(pred) - np.log(rgb_to_gray(gt[-1])))
print("warp residual in log units: max %.3f (threshold %.2f)" % (err.max(), ds.thresholds.max))

sharp = edi_sharp(frame, ds.thresholds, 9)
print("EDI midpoint              %.2f dB" % psnr(sharp, gt[4]))
lat, times = edi_latents(frame, ds.thresholds, 9)
for t, a, b in zip(times, lat, gt):
    print("  t=%.4f  %.2f dB" % (t, psnr(a, b)))

# averaging the recovered latents should give the blurry frame back
print("reblur mean abs error %.4f" % np.abs(np.mean(lat, 0) - frame.image).mean())
