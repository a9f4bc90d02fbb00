import init, {
  target_field, field_spectrum, playground_weights, probe_ratios,
} from "./pkg/pinnweights_wasm.js";

const $ = (id) => document.getElementById(id);
const num = (id) => Number($(id).value);

function guarded(errId, fn) {
  return () => {
    $(errId).textContent = "";
    try {
      fn();
    } catch (e) {
      $(errId).textContent = String(e);
    }
  };
}

function drawField(canvas, field, side) {
  const ctx = canvas.getContext("2d");
  const max = field.reduce((m, v) => Math.max(m, Math.abs(v)), 1e-300);
  const img = ctx.createImageData(side, side);
  for (let i = 0; i < field.length; i++) {
    const t = field[i] / max;
    img.data[4 * i] = t > 0 ? 255 : Math.round(255 * (1 + t));
    img.data[4 * i + 1] = Math.round(255 * (1 - Math.abs(t)));
    img.data[4 * i + 2] = t < 0 ? 255 : Math.round(255 * (1 - t));
    img.data[4 * i + 3] = 255;
  }
  const tmp = new OffscreenCanvas(side, side);
  tmp.getContext("2d").putImageData(img, 0, 0);
  ctx.imageSmoothingEnabled = false;
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  ctx.drawImage(tmp, 0, 0, canvas.width, canvas.height);
}

function drawSpectrum(canvas, energy) {
  const ctx = canvas.getContext("2d");
  const w = canvas.width, h = canvas.height, pad = 24;
  ctx.clearRect(0, 0, w, h);
  const logs = Array.from(energy, (e) => Math.log10(Math.max(e, 1e-16)));
  const hi = Math.max(...logs), lo = Math.max(Math.min(...logs), hi - 16);
  ctx.strokeStyle = "#888";
  ctx.strokeRect(pad, 4, w - pad - 4, h - pad - 4);
  ctx.fillStyle = "#222";
  ctx.fillText("log E(k)", 2, 12);
  ctx.fillText("k", w - 12, h - 6);
  ctx.strokeStyle = "#1760a5";
  ctx.beginPath();
  logs.forEach((v, k) => {
    const x = pad + (k / (logs.length - 1)) * (w - pad - 4);
    const y = 4 + ((hi - Math.max(v, lo)) / (hi - lo || 1)) * (h - pad - 8);
    k === 0 ? ctx.moveTo(x, y) : ctx.lineTo(x, y);
  });
  ctx.stroke();
}

function fillTable(table, header, rows) {
  table.innerHTML = "";
  const tr = table.insertRow();
  header.forEach((h) => {
    const th = document.createElement("th");
    th.textContent = h;
    tr.appendChild(th);
  });
  rows.forEach((row) => {
    const r = table.insertRow();
    row.forEach((c) => (r.insertCell().textContent = c));
  });
}

const drawTarget = guarded("t-err", () => {
  const side = num("t-side");
  const field = target_field(num("t-modes"), num("t-seed"), side);
  drawField($("t-field"), field, side);
  drawSpectrum($("t-spec"), field_spectrum(field, side));
});

const STRATEGIES = ["uniform", "inverse-dirichlet", "max-avg", "mgda"];

const weigh = guarded("w-err", () => {
  const scales = new Float64Array($("w-scales").value.split(",").map(Number));
  const w = playground_weights(scales, num("w-rho"), num("w-n"), num("w-seed"));
  const k = scales.length;
  const rows = STRATEGIES.map((s, i) => [s, ...Array.from(w.slice(i * k, i * k + k), (v) => v.toExponential(3))]);
  fillTable($("w-table"), ["strategy", ...Array.from(scales, (s, i) => `λ${i} (×${s})`)], rows);
});

const probe = guarded("p-err", () => {
  const r = probe_ratios(num("p-m"), num("p-side"), num("p-seed"));
  const slope = r[r.length - 1];
  const rows = Array.from(r.slice(0, -1), (v, i) => [String(2 ** i), v.toExponential(3)]);
  rows.push(["slope", slope.toFixed(3)]);
  fillTable($("p-table"), ["k0", "ratio"], rows);
});

await init();
$("t-go").onclick = drawTarget;
$("w-go").onclick = weigh;
$("p-go").onclick = probe;
drawTarget();
weigh();
