# Short training run on the toy dataset, blur-only vs blur+event.
# 400 iterations per run keeps this around a minute; the acceptance suite uses 2000.
import sys
import tempfile
import time

from evsplat.eval_metrics import evaluate
from evsplat.synthdata import generate_dataset, load_dataset
from evsplat.trainer import TrainConfig, init_scene, train

iters = int(sys.argv[1]) if len(sys.argv) > 1 else 400
ds = load_dataset(generate_dataset(tempfile.mkdtemp(prefix="evsplat_toy_"), seed=1))

base = evaluate(init_scene(ds.points, ds.point_colors, ds.extent), ds.init_poses, ds, initial=ds.init_poses)
print("init       psnr %.2f  ate %.4f" % (base.mean_psnr, base.ate_final))

for name, kw in [("blur", dict(use_event=False, use_int=False, use_depth=False)),
                 ("blur+event", dict(use_int=False, use_depth=False)),
                 ("all", {})]:
    t = time.time()
    cfg = TrainConfig(total_iters=iters, warmup_iters=round(0.06 * iters), **kw)
    scene, trajs, log = train(ds, cfg)
    rep = evaluate(scene, trajs, ds, initial=ds.init_poses, log=log)
    print("%-10s psnr %.2f  ssim %.4f  ate %.4f  (%.0fs)" % (name, rep.mean_psnr, rep.mean_ssim, rep.ate_final,
                                                          time.time() - t))
    print("           blur loss", rep.loss_summary["blur"])
