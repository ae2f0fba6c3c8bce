import init, { coefficientRows, poles, psdDemo } from "../pkg/qcbadc_web.js";

const $ = (id) => document.getElementById(id);
const num = (id) => Number($(id).value);

function axes(ctx, w, h, xr, yr) {
  const sx = (x) => ((x - xr[0]) / (xr[1] - xr[0])) * (w - 40) + 35;
  const sy = (y) => h - 20 - ((y - yr[0]) / (yr[1] - yr[0])) * (h - 30);
  ctx.clearRect(0, 0, w, h);
  ctx.strokeStyle = "#999";
  ctx.strokeRect(35, 10, w - 40, h - 30);
  ctx.fillStyle = "#444";
  ctx.fillText(xr[0].toPrecision(3), 35, h - 5);
  ctx.fillText(xr[1].toPrecision(3), w - 40, h - 5);
  ctx.fillText(yr[1].toPrecision(3), 0, 18);
  ctx.fillText(yr[0].toPrecision(3), 0, h - 20);
  return [sx, sy];
}

function line(ctx, xs, ys, sx, sy, color) {
  ctx.strokeStyle = color;
  ctx.beginPath();
  xs.forEach((x, i) => (i ? ctx.lineTo(sx(x), sy(ys[i])) : ctx.moveTo(sx(x), sy(ys[i]))));
  ctx.stroke();
}

function drawCoefficients() {
  const points = 400;
  let rows;
  try {
    rows = coefficientRows(num("bt"), num("phi"), points);
  } catch (e) {
    $("status").textContent = e.message;
    return;
  }
  const col = (j) => Array.from({ length: points }, (_, i) => rows[5 * i + j]);
  const x = col(0);
  const ys = [1, 2, 3, 4].map(col);
  const all = ys.flat();
  const c = $("coeff");
  const ctx = c.getContext("2d");
  const [sx, sy] = axes(ctx, c.width, c.height, [0, 0.5], [Math.min(...all), Math.max(...all)]);
  ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728"].forEach((color, j) => line(ctx, x, ys[j], sx, sy, color));
}

function drawPoles() {
  const n = num("n");
  let p;
  try {
    p = poles(n, num("osr"), num("fn"));
  } catch (e) {
    $("status").textContent = e.message;
    return;
  }
  const c = $("poles");
  const ctx = c.getContext("2d");
  const ims = p.filter((_, i) => i % 2 === 1);
  const lim = Math.max(0.05, ...ims.map(Math.abs)) * 1.1;
  const [sx, sy] = axes(ctx, c.width, c.height, [-lim / 2, lim / 2], [-lim, lim]);
  for (let i = 0; i < p.length / 2; i++) {
    ctx.fillStyle = i < n ? "#aaa" : "#000";
    ctx.beginPath();
    ctx.arc(sx(p[2 * i]), sy(p[2 * i + 1]), i < n ? 5 : 3, 0, 2 * Math.PI);
    ctx.fill();
  }
}

function simulate() {
  $("status").textContent = "running...";
  setTimeout(() => {
    const t0 = performance.now();
    let d;
    try {
      d = psdDemo(num("n"), num("osr"), num("fn"), num("taps"));
    } catch (e) {
      $("status").textContent = e.message;
      return;
    }
    const f = d.freqs;
    const db = d.db;
    const c = $("psd");
    const ctx = c.getContext("2d");
    const lo = Math.max(Math.min(...db), Math.max(...db) - 200);
    const [sx, sy] = axes(ctx, c.width, c.height, [f[0], f[f.length - 1]], [lo, Math.max(...db) + 5]);
    line(ctx, Array.from(f), Array.from(db, (v) => Math.max(v, lo)), sx, sy, "#1f77b4");
    ctx.strokeStyle = "#d62728";
    ctx.beginPath();
    ctx.moveTo(sx(num("fn")), 10);
    ctx.lineTo(sx(num("fn")), c.height - 20);
    ctx.stroke();
    const fh = Number.isNaN(d.f_hat_n) ? "none" : d.f_hat_n.toFixed(5);
    $("result").textContent =
      `SNR ${d.snr_db.toFixed(1)} dB, test tone ${d.f_test.toFixed(5)} fs, notch estimate ${fh} fs`;
    $("status").textContent = `${((performance.now() - t0) / 1000).toFixed(2)} s`;
    d.free();
  }, 10);
}

await init();
["bt", "phi"].forEach((id) => $(id).addEventListener("input", drawCoefficients));
["n", "osr", "fn"].forEach((id) => $(id).addEventListener("input", drawPoles));
$("sim").addEventListener("click", simulate);
drawCoefficients();
drawPoles();
