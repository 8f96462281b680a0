// Build with: wasm-pack build crates/wasm --target web --out-dir www/pkg
import init, { Demo } from "./pkg/osop_wasm.js";

const $ = (id) => document.getElementById(id);
let demo = null;

function draw(canvas, rgba) {
  const n = demo.size();
  const img = new ImageData(new Uint8ClampedArray(rgba), n, n);
  canvas.getContext("2d").putImageData(img, 0, 0);
}

function status(msg) {
  $("status").textContent = msg;
}

function renderView() {
  if (!demo) return;
  draw($("view"), demo.render_view(+$("az").value, +$("el").value, +$("roll").value, $("nocs").checked));
}

async function load() {
  status("Rendering templates…");
  await new Promise((r) => setTimeout(r, 0));
  const t = performance.now();
  demo?.free();
  demo = new Demo($("object").value);
  status(`${demo.templates()} templates in ${((performance.now() - t) / 1000).toFixed(1)} s`);
  renderView();
  newScene();
}

function newScene() {
  draw($("scene-canvas"), demo.new_scene(BigInt($("seed").value), $("occluded").checked));
  $("report").textContent = "";
}

function runDetect() {
  try {
    const report = JSON.parse(demo.detect($("depth").checked, $("multi").checked));
    draw($("scene-canvas"), demo.last_overlay());
    $("report").textContent = JSON.stringify(report, null, 2);
  } catch (e) {
    $("report").textContent = `detection failed: ${e}`;
  }
}

await init();
for (const id of ["az", "el", "roll", "nocs"]) $(id).addEventListener("input", renderView);
$("load").addEventListener("click", load);
$("scene").addEventListener("click", () => { $("seed").value = +$("seed").value + 1; newScene(); });
$("detect").addEventListener("click", runDetect);
await load();
