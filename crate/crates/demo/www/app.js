import init, { twinGateSurface, rolloutAttribution, cellAudit } from "./pkg/atrseq_demo.js";

const $ = (id) => document.getElementById(id);
const num = (id) => Number($(id).value);

function guard(msgId, f) {
  return () => {
    $(msgId).textContent = "";
    $(msgId).className = "";
    try {
      f();
    } catch (e) {
      $(msgId).textContent = String(e.message ?? e);
      $(msgId).className = "error";
    }
  };
}

// Paints a matrix of values onto a canvas, one block per cell.
function paint(canvas, rows, color) {
  const ctx = canvas.getContext("2d");
  const n = rows.length, m = rows[0].length;
  const w = canvas.width / m, h = canvas.height / n;
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  rows.forEach((row, r) => row.forEach((v, c) => {
    ctx.fillStyle = color(v);
    ctx.fillRect(Math.floor(c * w), Math.floor(r * h), Math.ceil(w), Math.ceil(h));
  }));
  return { ctx, w, h };
}

const diverging = (v) => {
  const a = Math.min(1, Math.abs(v));
  const fade = Math.round(255 * (1 - a));
  return v >= 0 ? `rgb(255,${fade},${fade})` : `rgb(${fade},${fade},255)`;
};

function drawSurface() {
  const r = num("s-range");
  const grid = JSON.parse(twinGateSurface(-r, r, num("s-res")));
  // Rows are x (input), columns y (history); flip so x grows upward.
  paint($("s-canvas"), grid.values.slice().reverse(), diverging);
  $("s-msg").textContent = `x and y in [${-r}, ${r}]`;
}

function drawRollout() {
  const v = JSON.parse(rolloutAttribution(num("r-seed"), num("r-len"), num("r-hidden"), num("r-scale")));
  const peak = Math.max(...v.weights.flat());
  const { ctx, w, h } = paint($("r-canvas"), v.weights, (x) => {
    const shade = Math.round(255 * (1 - x / peak));
    return `rgb(${shade},${shade},${shade})`;
  });
  ctx.fillStyle = "#e4572e";
  for (const [t, k] of v.links) {
    ctx.beginPath();
    ctx.arc((k + 0.5) * w, (t + 0.5) * h, Math.max(2, Math.min(w, h) / 5), 0, 2 * Math.PI);
    ctx.fill();
  }
  $("r-msg").textContent = `rebuild residual ${v.residual.toExponential(2)}, peak weight ${peak.toFixed(3)}`;
}

function drawAudit() {
  const rows = JSON.parse(cellAudit(num("a-in"), num("a-hidden")));
  const head = "<tr><th>cell</th><th>weight matrices</th><th>parameters</th><th>× ATR</th><th>matmuls / step</th></tr>";
  $("a-table").innerHTML = head + rows.map((r) =>
    `<tr><td>${r.cell}</td><td>${r.weights.join(", ")}</td><td>${r.param_count.toLocaleString()}</td>` +
    `<td>${r.param_ratio.toFixed(2)}</td><td>${r.matmuls_per_step}</td></tr>`).join("");
}

await init();
$("s-go").onclick = guard("s-msg", drawSurface);
$("r-go").onclick = guard("r-msg", drawRollout);
$("a-go").onclick = guard("a-msg", drawAudit);
$("s-go").onclick();
$("r-go").onclick();
$("a-go").onclick();
