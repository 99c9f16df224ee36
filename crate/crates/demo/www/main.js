import init, { Scenario } from "./pkg/graph_forecast_demo.js";

const POINTS = 200;
const $ = (id) => document.getElementById(id);
let state = null;

function color(p) {
  const v = Math.round(255 * (1 - Math.min(1, Math.sqrt(p))));
  return `rgb(${v},${v},255)`;
}

function build() {
  $("error").textContent = "";
  state?.scenario.free();
  state = null;
  try {
    const kind = document.querySelector("input[name=kind]:checked").value;
    const n = Number($("n").value);
    const scenario = kind === "ring"
      ? Scenario.ring(n, Number($("ccw").value), Number($("cw").value), 0)
      : Scenario.geometric(n, Number($("radius").value), BigInt($("gseed").value), 0);
    const horizon = Number($("horizon").value);
    state = {
      scenario,
      horizon,
      n: scenario.num_nodes,
      layout: scenario.layout(),
      edges: scenario.edges(),
      traj: scenario.trajectory(horizon, POINTS),
      kl: scenario.kl_curves(2 * horizon, POINTS),
      events: [],
    };
  } catch (e) {
    $("error").textContent = String(e.message ?? e);
    return;
  }
  drawHeat();
  drawGraph();
  drawKl();
}

function drawGraph() {
  const c = $("graph").getContext("2d");
  const { n, layout, edges, traj } = state;
  const k = Number($("time").value);
  const size = 320;
  c.clearRect(0, 0, size, size);
  c.strokeStyle = "#bbb";
  for (let i = 0; i < edges.length; i += 3) {
    const [s, d] = [edges[i], edges[i + 1]];
    c.lineWidth = 0.5 + edges[i + 2] / 2;
    c.beginPath();
    c.moveTo(layout[2 * s] * size, layout[2 * s + 1] * size);
    c.lineTo(layout[2 * d] * size, layout[2 * d + 1] * size);
    c.stroke();
  }
  for (let v = 0; v < n; v++) {
    c.fillStyle = color(traj[k * n + v]);
    c.beginPath();
    c.arc(layout[2 * v] * size, layout[2 * v + 1] * size, 7, 0, 2 * Math.PI);
    c.fill();
    c.strokeStyle = "#333";
    c.lineWidth = 1;
    c.stroke();
  }
  $("tlabel").textContent = `t = ${(state.horizon * k / (POINTS - 1)).toFixed(2)}`;
}

function drawHeat() {
  const c = $("heat").getContext("2d");
  const { n, traj, events, horizon } = state;
  const w = 560, h = 320;
  const cw = w / POINTS, ch = h / n;
  for (let k = 0; k < POINTS; k++) {
    for (let v = 0; v < n; v++) {
      c.fillStyle = color(traj[k * n + v]);
      c.fillRect(k * cw, v * ch, cw + 0.5, ch + 0.5);
    }
  }
  c.fillStyle = "#e60";
  for (let i = 0; i < events.length; i += 2) {
    const x = (events[i] / horizon) * w;
    const y = (events[i + 1] + 0.5) * ch;
    c.beginPath();
    c.arc(x, y, 3, 0, 2 * Math.PI);
    c.fill();
  }
}

function drawKl() {
  const c = $("kl").getContext("2d");
  const w = 900, h = 240, pad = 30;
  const kl = state.kl;
  c.clearRect(0, 0, w, h);
  const logs = Array.from(kl, (x) => Math.log10(Math.max(x, 1e-12)));
  const lo = Math.min(...logs), hi = Math.max(...logs, lo + 1);
  const y = (l) => h - pad - ((l - lo) / (hi - lo)) * (h - 2 * pad);
  const x = (k) => pad + (k / (POINTS - 1)) * (w - 2 * pad);
  c.strokeStyle = "#999";
  c.beginPath();
  c.moveTo(x((POINTS - 1) / 2), pad / 2);
  c.lineTo(x((POINTS - 1) / 2), h - pad);
  c.stroke();
  c.fillStyle = "#555";
  c.fillText("T", x((POINTS - 1) / 2) + 4, h - pad + 14);
  c.fillText("0", pad, h - pad + 14);
  c.fillText("2T", w - pad - 10, h - pad + 14);
  c.fillText(`1e${hi.toFixed(0)}`, 0, y(hi) + 4);
  c.fillText(`1e${lo.toFixed(0)}`, 0, y(lo));
  ["#1f77b4", "#2ca02c", "#d62728"].forEach((col, j) => {
    c.strokeStyle = col;
    c.lineWidth = 1.5;
    c.beginPath();
    for (let k = 0; k < POINTS; k++) {
      const px = x(k), py = y(logs[3 * k + j]);
      k ? c.lineTo(px, py) : c.moveTo(px, py);
    }
    c.stroke();
  });
}

function sample() {
  if (!state) return;
  try {
    state.events = state.scenario.sample(Number($("lambda").value), state.horizon, BigInt($("seed").value));
  } catch (e) {
    $("error").textContent = String(e.message ?? e);
    return;
  }
  $("count").textContent = `${state.events.length / 2} events`;
  drawHeat();
}

await init();
$("build").onclick = build;
$("sample").onclick = sample;
$("time").oninput = () => state && drawGraph();
build();
