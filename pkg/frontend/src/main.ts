/** Browser wire-up: constraint panel -> session -> chat + progress. */

import { ApiClient, SessionBusyError } from "./api.js";
import { ChatView } from "./chatView.js";
import { ConstraintPanel } from "./constraintPanel.js";
import { ProgressView } from "./progressView.js";
import type { SkillInfo, TurnPayload } from "./types.js";

export async function startApp(root: HTMLElement, baseUrl = ""): Promise<void> {
  const api = new ApiClient(baseUrl);
  const skills = await api.getSkills();
  const skillIndex = new Map<number, SkillInfo>(skills.map((s) => [s.skill_id, s]));

  const panelRoot = document.createElement("div");
  const chatRoot = document.createElement("div");
  const progressRoot = document.createElement("div");
  const input = document.createElement("input");
  input.placeholder = "Write your turn…";
  const send = document.createElement("button");
  send.textContent = "Send";
  send.disabled = true;
  const start = document.createElement("button");
  start.textContent = "Start session";
  root.append(panelRoot, start, chatRoot, input, send, progressRoot);

  const panel = new ConstraintPanel(skills);
  renderPanel(panelRoot, panel, skills, () => {
    start.disabled = !panel.canSend();
  });
  start.disabled = !panel.canSend();

  let chat: ChatView | null = null;
  let progress: ProgressView | null = null;
  let sessionId: string | null = null;

  start.addEventListener("click", () => {
    const payload = panel.payload();
    if (!payload) {
      return;
    }
    void (async () => {
      const session = await api.createSession(payload);
      sessionId = session.session_id;
      const targets =
        session.constraints?.variant === "explicit" ? session.constraints.skills : [];
      chat = new ChatView(chatRoot, { skillIndex, targetSkills: targets });
      progress = new ProgressView(progressRoot, api, sessionId, skillIndex);
      await progress.refresh();
      send.disabled = false;
    })();
  });

  send.addEventListener("click", () => {
    if (!chat || !sessionId || !input.value.trim() || chat.isTyping()) {
      return;
    }
    const text = input.value;
    input.value = "";
    chat.addLearnerTurn(text);
    chat.beginBotStream();
    void api
      .streamTurn(sessionId, text, {
        onToken: (token) => chat?.appendToken(token),
        onFinal: (payload) => {
          chat?.finalizeBotTurn(payload as TurnPayload);
          void progress?.refresh();
        },
      })
      .catch((err) => {
        if (err instanceof SessionBusyError) {
          chat?.setTyping(true); // a turn is already in flight; keep the guard up
        } else {
          chat?.setTyping(false);
          throw err;
        }
      });
  });
}

function renderPanel(
  root: HTMLElement,
  panel: ConstraintPanel,
  skills: SkillInfo[],
  onChange: () => void,
): void {
  root.classList.add("constraint-panel");
  for (const [subcategory, byLevel] of panel.grouped()) {
    const group = document.createElement("fieldset");
    const legend = document.createElement("legend");
    legend.textContent = subcategory;
    group.append(legend);
    for (const [level, levelSkills] of byLevel) {
      for (const skill of levelSkills) {
        const label = document.createElement("label");
        const box = document.createElement("input");
        box.type = "checkbox";
        box.addEventListener("change", () => {
          panel.toggleSkill(skill.skill_id);
          onChange();
        });
        label.append(box, document.createTextNode(`${level} ${skill.guideword}`));
        label.title = skill.can_do;
        group.append(label);
      }
    }
    root.append(group);
  }
  void skills;
}
