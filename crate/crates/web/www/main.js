import init, { iou, corners, NoiseView, BandwidthView } from "./pkg/coperception_web.js";

const $ = (id) => document.getElementById(id);

function drawPolygon(ctx, pts, toPx, stroke, fill) {
  ctx.beginPath();
  for (let i = 0; i < pts.length; i += 2) {
    const [x, y] = toPx(pts[i], pts[i + 1]);
    i === 0 ? ctx.moveTo(x, y) : ctx.lineTo(x, y);
  }
  ctx.closePath();
  ctx.fillStyle = fill;
  ctx.fill();
  ctx.strokeStyle = stroke;
  ctx.stroke();
}

function iouPanel() {
  const canvas = $("iou-canvas");
  const ctx = canvas.getContext("2d");
  const scale = 30;
  const toPx = (x, y) => [canvas.width / 2 + x * scale, canvas.height / 2 - y * scale];
  const a = [0, 0, 4, 2, 0];
  const update = () => {
    const b = [+$("iou-x").value, +$("iou-y").value, 3, 1.5, +$("iou-yaw").value];
    $("iou-out").textContent = iou(a, b).toFixed(4);
    ctx.clearRect(0, 0, canvas.width, canvas.height);
    drawPolygon(ctx, corners(a), toPx, "#246", "rgba(40,90,160,.25)");
    drawPolygon(ctx, corners(b), toPx, "#a40", "rgba(200,90,30,.25)");
  };
  for (const id of ["iou-x", "iou-y", "iou-yaw"]) $(id).addEventListener("input", update);
  update();
}

function noisePanel() {
  const view = new NoiseView(3);
  const canvas = $("noise-canvas");
  const ctx = canvas.getContext("2d");
  const update = () => {
    const pts = view.objects(+$("noise-xyz").value, +$("noise-heading").value, +$("noise-seed").value);
    let xs = [], ys = [];
    for (let i = 0; i < pts.length; i += 2) { xs.push(pts[i]); ys.push(pts[i + 1]); }
    const pad = 5;
    const [x0, x1] = [Math.min(...xs) - pad, Math.max(...xs) + pad];
    const [y0, y1] = [Math.min(...ys) - pad, Math.max(...ys) + pad];
    const s = Math.min(canvas.width / (x1 - x0), canvas.height / (y1 - y0));
    const toPx = (x, y) => [(x - x0) * s, canvas.height - (y - y0) * s];
    ctx.clearRect(0, 0, canvas.width, canvas.height);
    let shift = 0;
    for (let i = 0; i < pts.length; i += 4) {
      const [tx, ty] = toPx(pts[i], pts[i + 1]);
      const [nx, ny] = toPx(pts[i + 2], pts[i + 3]);
      shift += Math.hypot(pts[i] - pts[i + 2], pts[i + 1] - pts[i + 3]);
      ctx.strokeStyle = "#999";
      ctx.beginPath(); ctx.moveTo(tx, ty); ctx.lineTo(nx, ny); ctx.stroke();
      ctx.fillStyle = "#666"; ctx.fillRect(tx - 3, ty - 3, 6, 6);
      ctx.fillStyle = "#c22"; ctx.beginPath(); ctx.arc(nx, ny, 3, 0, 2 * Math.PI); ctx.fill();
    }
    $("noise-out").textContent = `${(shift / (pts.length / 4)).toFixed(3)} m`;
  };
  for (const id of ["noise-xyz", "noise-heading", "noise-seed"]) $(id).addEventListener("input", update);
  update();
}

function bandwidthPanel() {
  let view = new BandwidthView(5);
  const canvas = $("bw-canvas");
  const ctx = canvas.getContext("2d");
  const update = () => {
    const { height: h, width: w } = view;
    const conf = view.confidence();
    const sel = view.threshold(+$("bw-threshold").value);
    const mask = sel.mask;
    const cw = canvas.width / w, ch = canvas.height / h;
    for (let r = 0; r < h; r++) {
      for (let c = 0; c < w; c++) {
        const i = r * w + c;
        const g = Math.round(255 * (1 - conf[i]));
        ctx.fillStyle = mask[i] ? `rgb(${g},${g},255)` : `rgb(${g},${g},${g})`;
        ctx.fillRect(c * cw, (h - 1 - r) * ch, Math.ceil(cw), Math.ceil(ch));
      }
    }
    $("bw-cells").textContent = `${sel.kept} / ${h * w}`;
    $("bw-bytes").textContent = sel.bytes === 0 ? "0 (nothing sent)" : `${sel.bytes} (2^${sel.log2_bytes.toFixed(2)})`;
  };
  $("bw-threshold").addEventListener("input", update);
  $("bw-weights").addEventListener("change", async (e) => {
    const file = e.target.files[0];
    if (!file) return;
    try {
      view = new BandwidthView(5, new Uint8Array(await file.arrayBuffer()));
      $("status").textContent = `Loaded ${file.name}.`;
      $("status").className = "";
    } catch (err) {
      $("status").textContent = String(err);
      $("status").className = "err";
    }
    update();
  });
  update();
}

try {
  await init();
  iouPanel();
  noisePanel();
  bandwidthPanel();
  $("status").textContent = "";
} catch (err) {
  $("status").textContent = String(err);
  $("status").className = "err";
}
