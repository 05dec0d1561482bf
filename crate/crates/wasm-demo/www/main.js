import init, { tweedieCurve, ar1Path, fitDemo } from "./pkg/caic_wasm_demo.js";

const $ = (id) => document.getElementById(id);
const num = (id) => Number($(id).value);

function plot(canvas, xs, ys, opts = {}) {
  const ctx = canvas.getContext("2d");
  const w = canvas.width, h = canvas.height, pad = 30;
  ctx.clearRect(0, 0, w, h);
  const xmin = Math.min(...xs), xmax = Math.max(...xs);
  const ymin = opts.ymin ?? Math.min(...ys), ymax = Math.max(...ys);
  const sx = (x) => pad + (x - xmin) / (xmax - xmin || 1) * (w - 2 * pad);
  const sy = (y) => h - pad - (y - ymin) / (ymax - ymin || 1) * (h - 2 * pad);
  ctx.strokeStyle = "#999";
  ctx.beginPath();
  ctx.moveTo(pad, sy(Math.max(ymin, Math.min(0, ymax))));
  ctx.lineTo(w - pad, sy(Math.max(ymin, Math.min(0, ymax))));
  ctx.stroke();
  ctx.strokeStyle = "#1f5fa8";
  ctx.beginPath();
  xs.forEach((x, i) => (i ? ctx.lineTo(sx(x), sy(ys[i])) : ctx.moveTo(sx(x), sy(ys[i]))));
  ctx.stroke();
  ctx.fillStyle = "#333";
  ctx.fillText(ymax.toPrecision(3), 2, pad);
  ctx.fillText(xmax.toPrecision(3), w - pad - 10, h - 10);
}

function guard(out, f) {
  try {
    f();
  } catch (e) {
    out.innerHTML = `<span class="err">${e}</span>`;
  }
}

function drawTweedie() {
  guard($("tw-info"), () => {
    const c = JSON.parse(tweedieCurve(num("tw-mu"), num("tw-phi"), num("tw-p"), num("tw-ymax"), 400));
    $("tw-info").textContent = `P(Y = 0) = ${c.zero_mass.toFixed(4)}`;
    plot($("tw-canvas"), c.y, c.density, { ymin: 0 });
  });
}

function drawPath() {
  guard($("ar-info"), () => {
    const x = JSON.parse(ar1Path(num("ar-len"), num("ar-rho"), num("ar-seed")));
    $("ar-info").textContent = "";
    plot($("ar-canvas"), x.map((_, i) => i + 1), x);
  });
}

function runFit() {
  const out = $("fit-out");
  out.textContent = "fitting...";
  setTimeout(() => guard(out, () => {
    const r = JSON.parse(fitDemo($("fit-family").value, num("fit-years"), num("fit-reps"),
      num("fit-disp"), num("fit-delta"), num("fit-seed")));
    const rows = r.parameters
      .map(([n, t, e]) => `<tr><td>${n}</td><td>${t.toFixed(3)}</td><td>${e.toFixed(3)}</td></tr>`)
      .join("");
    const m1 = r.caic_method1 == null ? "n/a" : r.caic_method1.toFixed(3);
    out.innerHTML = `
      <p>${r.n_observations} observations, ${r.converged ? "converged" : "not converged"}</p>
      <table><tr><th>parameter</th><th>true</th><th>estimate</th></tr>${rows}</table>
      <table>
        <tr><td>-2 l_c</td><td>${r.neg2_lc.toFixed(3)}</td></tr>
        <tr><td>p_c / q</td><td>${r.p_c} / ${r.q}</td></tr>
        <tr><td>trace</td><td>${r.method2_trace.toFixed(3)}</td></tr>
        <tr><td>cAIC method 2</td><td>${r.caic_method2.toFixed(3)}</td></tr>
        <tr><td>cAIC method 1</td><td>${m1}</td></tr>
      </table>
      ${r.notes.map((n) => `<p>${n}</p>`).join("")}`;
  }), 10);
}

await init();
$("tw-go").onclick = drawTweedie;
$("ar-go").onclick = drawPath;
$("fit-go").onclick = runFit;
drawTweedie();
drawPath();
