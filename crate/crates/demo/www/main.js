import init, { Scene, inflate_kernel } from "./pkg/neurovit_demo.js";

const $ = (id) => document.getElementById(id);
let scene;

function paint(canvas, w, h, values, colour) {
  canvas.width = w;
  canvas.height = h;
  canvas.style.width = `${w * 4}px`;
  canvas.style.height = `${h * 4}px`;
  const ctx = canvas.getContext("2d");
  const img = ctx.createImageData(w, h);
  values.forEach((v, i) => {
    const [r, g, b] = colour(v);
    img.data.set([r, g, b, 255], i * 4);
  });
  ctx.putImageData(img, 0, 0);
}

const grey = (v) => [v * 255, v * 255, v * 255];

function diverging(limit) {
  return (v) => {
    const t = Math.max(-1, Math.min(1, v / limit));
    return t >= 0 ? [255, 255 * (1 - t), 255 * (1 - t)] : [255 * (1 + t), 255 * (1 + t), 255];
  };
}

function drawSlice() {
  const z = Number($("slice").value);
  const thr = Number($("thr").value);
  const [w, h] = [scene.width(), scene.height()];
  $("slice-out").textContent = `${z + 1} / ${scene.depth()}`;
  paint($("image"), w, h, scene.image_slice(z), grey);
  paint($("label"), w, h, scene.label_slice(z), grey);
  paint($("mask"), w, h, scene.mask_slice(z, thr), grey);
}

function rescore() {
  const thr = Number($("thr").value);
  $("thr-out").textContent = thr.toFixed(2);
  const s = JSON.parse(scene.score(thr));
  $("dice").textContent = s.dice.toFixed(4);
  $("hd95").textContent = s.hd95 === null ? "undefined (empty mask)" : s.hd95.toFixed(3);
  drawSlice();
}

function regenerate() {
  scene?.free();
  scene = new Scene(BigInt($("seed").value), Number($("trees").value), 64, 64, 15);
  $("slice").max = scene.depth() - 1;
  $("slice").value = Math.floor(scene.depth() / 2);
  rescore();
}

function drawKernels() {
  const p = Number($("patch").value);
  const d = Number($("depth").value);
  const host = $("kernels");
  host.replaceChildren();
  try {
    const data = inflate_kernel(p, d, $("strategy").value, BigInt($("kseed").value));
    const limit = Math.max(...data.map(Math.abs)) || 1;
    for (let s = 0; s <= d; s++) {
      const c = document.createElement("canvas");
      paint(c, p, p, data.slice(s * p * p, (s + 1) * p * p), diverging(limit));
      c.style.width = c.style.height = "96px";
      if (s === 0) c.style.marginRight = "2rem";
      host.append(c);
    }
  } catch (e) {
    host.textContent = String(e);
  }
}

await init();
$("regen").onclick = regenerate;
$("slice").oninput = drawSlice;
$("thr").oninput = rescore;
for (const id of ["patch", "depth", "strategy", "kseed"]) $(id).oninput = drawKernels;
regenerate();
drawKernels();
