// Built with: wasm-pack build crates/web --target web --out-dir www/pkg
import init, { sketch, graph, attention, params, synth } from "./pkg/sketch_mgt_web.js";

const $ = (id) => document.getElementById(id);
const pad = $("pad");
const ctx = pad.getContext("2d");
const heat = $("heat");
const hctx = heat.getContext("2d");
const SCALE = pad.width / 256;

let strokes = [];
let current = null;
let edges = [];
let points = [];
let heads = [];
let selected = null;

function status(msg) {
  $("status").textContent = msg || "";
}

function call(f) {
  try {
    status("");
    return f();
  } catch (e) {
    status(e.message || String(e));
    return null;
  }
}

function draw() {
  ctx.clearRect(0, 0, pad.width, pad.height);
  ctx.strokeStyle = "#bbb";
  ctx.lineWidth = 2;
  for (const s of strokes) {
    ctx.beginPath();
    s.forEach(([x, y], i) => (i ? ctx.lineTo(x * SCALE, y * SCALE) : ctx.moveTo(x * SCALE, y * SCALE)));
    ctx.stroke();
  }
  ctx.strokeStyle = "rgba(30, 90, 200, 0.45)";
  ctx.lineWidth = 1;
  for (const [i, j] of edges) {
    const [a, b] = [points[i], points[j]];
    if (!a || !b) continue;
    ctx.beginPath();
    ctx.moveTo(a[0] * SCALE, a[1] * SCALE);
    ctx.lineTo(b[0] * SCALE, b[1] * SCALE);
    ctx.stroke();
  }
  const head = heads[$("head").value];
  const n = points.length;
  points.forEach(([x, y], j) => {
    let r = 3;
    ctx.fillStyle = "#222";
    if (head && selected !== null) {
      const w = head.weights[selected * n + j];
      r = 2 + 14 * Math.sqrt(w);
      ctx.fillStyle = j === selected ? "#d22" : `rgba(220, 100, 0, ${0.3 + 0.7 * w})`;
    }
    ctx.beginPath();
    ctx.arc(x * SCALE, y * SCALE, r, 0, 2 * Math.PI);
    ctx.fill();
  });
}

function drawHeat() {
  hctx.clearRect(0, 0, heat.width, heat.height);
  const head = heads[$("head").value];
  if (!head) return;
  const n = points.length;
  const cell = heat.width / n;
  const max = Math.max(...head.weights, 1e-12);
  for (let i = 0; i < n; i++) {
    for (let j = 0; j < n; j++) {
      const v = head.weights[i * n + j] / max;
      hctx.fillStyle = `rgb(${255 - 200 * v}, ${255 - 140 * v}, 255)`;
      hctx.fillRect(j * cell, i * cell, Math.ceil(cell), Math.ceil(cell));
    }
  }
}

function refreshPoints() {
  edges = [];
  heads = [];
  selected = null;
  $("head").innerHTML = "";
  drawHeat();
  if (!strokes.length) {
    points = [];
    draw();
    return;
  }
  const r = call(() => JSON.parse(sketch(JSON.stringify(strokes), 100)));
  points = r ? r.points : [];
  draw();
}

function canvasPoint(e) {
  const rect = pad.getBoundingClientRect();
  const x = Math.round(((e.clientX - rect.left) / rect.width) * 255);
  const y = Math.round(((e.clientY - rect.top) / rect.height) * 255);
  return [Math.max(0, Math.min(255, x)), Math.max(0, Math.min(255, y))];
}

pad.addEventListener("pointerdown", (e) => {
  const p = canvasPoint(e);
  if (heads.length && points.length) {
    let best = null;
    let bd = Infinity;
    points.forEach(([x, y], i) => {
      const d = (x - p[0]) ** 2 + (y - p[1]) ** 2;
      if (d < bd) [bd, best] = [d, i];
    });
    if (bd < 100) {
      selected = best;
      draw();
      return;
    }
  }
  current = [p];
  strokes.push(current);
  $("name").textContent = "";
});
pad.addEventListener("pointermove", (e) => {
  if (!current) return;
  const p = canvasPoint(e);
  const last = current[current.length - 1];
  if (Math.hypot(p[0] - last[0], p[1] - last[1]) >= 6) {
    current.push(p);
    draw();
  }
});
window.addEventListener("pointerup", () => {
  if (!current) return;
  current = null;
  refreshPoints();
});

$("clear").onclick = () => {
  strokes = [];
  $("name").textContent = "";
  refreshPoints();
};

let synthSeed = 0;
$("random").onclick = () => {
  const r = call(() => JSON.parse(synth(synthSeed++, 20)));
  if (!r) return;
  strokes = r.strokes;
  $("name").textContent = r.name;
  refreshPoints();
};

$("show-graph").onclick = () => {
  const r = call(() => JSON.parse(graph(JSON.stringify(strokes), $("spec").value, 100, $("loops").checked)));
  if (!r) return;
  edges = r.edges;
  $("graph-info").textContent = `${r.size} key points, ${r.edges.length} edges, density ${r.density.toFixed(3)}`;
  draw();
};

$("show-attn").onclick = () => {
  const seed = Number($("seed").value) >>> 0;
  const r = call(() => JSON.parse(attention(JSON.stringify(strokes), $("graphs").value, $("mask").value, seed)));
  if (!r) return;
  heads = r.heads;
  $("head").innerHTML = heads.map((h, i) => `<option value="${i}">${h.graph} / head ${h.head}</option>`).join("");
  selected = 0;
  draw();
  drawHeat();
};
$("head").onchange = () => {
  draw();
  drawHeat();
};

$("count").onclick = () => {
  const r = call(() =>
    JSON.parse(
      params(
        Number($("dhat").value),
        Number($("layers").value),
        Number($("heads").value),
        $("graphs").value,
        Number($("classes").value),
      ),
    ),
  );
  if (!r) return;
  const rows = r.blocks.map(([name, n]) => `<tr><td>${name}</td><td class="n">${n.toLocaleString("en-US")}</td></tr>`);
  rows.push(`<tr><td><b>total</b></td><td class="n"><b>${r.total.toLocaleString("en-US")}</b></td></tr>`);
  $("count-out").innerHTML = `<table>${rows.join("")}</table>`;
};

init().then(() => {
  draw();
  status("");
});
