import init, { previewModes, perturb, distances } from "./pkg/surveyor_web.js";

const SAMPLE = `question_id,question_text,scale_kind,option_label,option_text,is_refusal,ordinal_value,range_min,range_max
trust,How much do you trust the news?,ordinal,1,Not at all,,1,,
trust,How much do you trust the news?,ordinal,2,Somewhat,,2,,
trust,How much do you trust the news?,ordinal,3,A lot,,3,,
trust,How much do you trust the news?,ordinal,99,Don't know,true,,,
vote,How likely are you to vote?,ordinal,1,Unlikely,,1,,
vote,How likely are you to vote?,ordinal,2,Likely,,2,,
`;

const $ = (id) => document.getElementById(id);

function show(target, fn) {
  const out = $(target);
  out.replaceChildren();
  try {
    fn(out);
  } catch (e) {
    const p = document.createElement("p");
    p.className = "error";
    p.textContent = String(e);
    out.append(p);
  }
}

function block(parent, title, text) {
  const h = document.createElement("h3");
  h.textContent = title;
  const pre = document.createElement("pre");
  pre.textContent = text;
  parent.append(h, pre);
}

function numbers(text) {
  return text.split(",").map((s) => s.trim()).filter(Boolean).map(Number);
}

function renderPreview(out) {
  const result = JSON.parse(previewModes(JSON.stringify({
    questionnaire: $("pv-questionnaire").value,
    persona: { id: "demo", system_prompt: $("pv-persona").value },
    template: { user_template: $("pv-template").value },
    method: JSON.parse($("pv-method").value),
  })));
  for (const m of result.modes) {
    const text = m.requests
      .map((req, i) => `--- request ${i + 1}\n` + req.map((t) => `[${t.role}]\n${t.content}`).join("\n\n"))
      .join("\n\n");
    block(out, `${m.mode}: ${m.calls} calls, ${m.input_chars} input chars`, text);
  }
  for (const s of result.skipped) block(out, `${s.mode}: skipped`, s.reason);
}

function renderPerturb(out) {
  const result = JSON.parse(perturb(JSON.stringify({
    questionnaire: $("pv-questionnaire").value,
    perturbations: JSON.parse($("pt-specs").value),
  })));
  block(out, `variant ${result.variant_id}`, `${result.changed.length} question(s) changed`);
  for (const d of result.changed) block(out, d.question_id, `before:\n${d.before}\n\nafter:\n${d.after}`);
}

function renderDistance(out) {
  const input = { p: numbers($("ds-p").value), q: numbers($("ds-q").value) };
  const pos = numbers($("ds-pos").value);
  if (pos.length) input.positions = pos;
  const r = JSON.parse(distances(JSON.stringify(input)));
  const fmt = (xs) => xs.map((x) => x.toFixed(3)).join("  ");
  block(out, `W1 = ${r.w1.toFixed(4)}, TVD = ${r.tvd.toFixed(4)}`,
    `p      ${fmt(r.p)}\nq      ${fmt(r.q)}\ncdf p  ${fmt(r.cdf_p)}\ncdf q  ${fmt(r.cdf_q)}`);
}

await init();
$("pv-questionnaire").value = SAMPLE;
$("pv-run").onclick = () => show("pv-out", renderPreview);
$("pt-run").onclick = () => show("pt-out", renderPerturb);
$("ds-run").onclick = () => show("ds-out", renderDistance);
