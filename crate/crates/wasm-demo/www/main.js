import init, { costHeatmap, acceptanceByPosition, overlapMatrix } from "./pkg/verispec_wasm.js";

const $ = (id) => document.getElementById(id);
const num = (id) => Number($(id).value);

// 0 -> dark blue, 1 -> yellow
function color(t) {
  const c = Math.max(0, Math.min(1, t));
  return `rgb(${Math.round(30 + 220 * c)},${Math.round(40 + 190 * c)},${Math.round(120 - 80 * c)})`;
}

function drawGrid(canvas, rows, rowLabels, colLabels, fmt) {
  const ctx = canvas.getContext("2d");
  const pad = 48;
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  const flat = rows.flat();
  const lo = Math.min(...flat), hi = Math.max(...flat);
  const w = (canvas.width - pad) / colLabels.length;
  const h = (canvas.height - pad) / rowLabels.length;
  ctx.font = "11px sans-serif";
  rows.forEach((row, i) => {
    row.forEach((v, j) => {
      ctx.fillStyle = color(hi > lo ? (v - lo) / (hi - lo) : 1);
      ctx.fillRect(pad + j * w, i * h, w - 1, h - 1);
      ctx.fillStyle = "#000";
      ctx.fillText(fmt(v), pad + j * w + 3, i * h + h / 2 + 4);
    });
    ctx.fillText(rowLabels[i], 4, i * h + h / 2 + 4);
  });
  colLabels.forEach((l, j) => ctx.fillText(l, pad + j * w + 3, canvas.height - pad / 2));
}

function drawBars(canvas, values) {
  const ctx = canvas.getContext("2d");
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  const w = canvas.width / Math.max(values.length, 1);
  ctx.font = "11px sans-serif";
  values.forEach((v, i) => {
    const bh = v * (canvas.height - 30);
    ctx.fillStyle = "#4a78c2";
    ctx.fillRect(i * w + 4, canvas.height - 20 - bh, w - 8, bh);
    ctx.fillStyle = "#000";
    ctx.fillText(`${i + 1}: ${v.toFixed(2)}`, i * w + 6, canvas.height - 6);
  });
}

function heat() {
  const ratios = [0.02, 0.05, 0.1, 0.2, 0.3, 0.5, 0.75, 1.0];
  const gammas = [1, 2, 3, 4, 6, 8, 12];
  const r = JSON.parse(costHeatmap(num("ctx"), num("alpha"), num("decay"), Float64Array.from(ratios), Uint32Array.from(gammas)));
  drawGrid($("heat"), r.throughput, gammas.map((g) => `γ=${g}`), ratios.map(String), (v) => v.toFixed(0));
}

function acceptance() {
  const r = JSON.parse(acceptanceByPosition($("sel").value, num("acc-ratio"), num("acc-gamma"), num("acc-seed")));
  drawBars($("acc"), r.per_position_acceptance);
  $("acc-out").textContent = `${r.iterations} iterations, ${r.mean_accepted.toFixed(3)} drafts accepted per iteration`;
}

function overlap() {
  const r = JSON.parse(overlapMatrix(num("ov-gamma"), num("ov-k"), num("ov-seed")));
  const labels = r.mean.map((_, i) => String(i + 1));
  drawGrid($("ov"), r.mean, labels, labels, (v) => v.toFixed(2));
  $("ov-out").textContent = `by distance: ${r.by_distance.map((v) => v.toFixed(3)).join(" ")} (${r.samples} samples)`;
}

function guard(f) {
  return () => {
    try {
      f();
    } catch (e) {
      alert(e);
    }
  };
}

await init();
$("heat-run").onclick = guard(heat);
$("acc-run").onclick = guard(acceptance);
$("ov-run").onclick = guard(overlap);
heat();
