/**
 * Conversation view: streams bot tokens as they arrive, then replaces the
 * streaming bubble with the finalized turn, highlighting skill spans with
 * hover tooltips. A badge appears on the learner's message when it contained
 * one of the session's target skills. While a turn is in flight (or the
 * service answers 409) the input is guarded with a typing indicator.
 */

import { segmentText } from "./spans.js";
import type { SkillInfo, TurnPayload } from "./types.js";

export interface ChatViewOptions {
  skillIndex: Map<number, SkillInfo>;
  targetSkills: number[];
}

export class ChatView {
  private streamingElement: HTMLElement | null = null;
  private streamed = "";
  renderCount = 0;

  constructor(
    private root: HTMLElement,
    private options: ChatViewOptions,
  ) {
    this.root.classList.add("chat-view");
    const list = document.createElement("div");
    list.className = "messages";
    const typing = document.createElement("div");
    typing.className = "typing-guard";
    typing.textContent = "bot is typing…";
    typing.style.display = "none";
    this.root.append(list, typing);
  }

  private get list(): HTMLElement {
    return this.root.querySelector(".messages") as HTMLElement;
  }

  setTyping(on: boolean): void {
    const guard = this.root.querySelector(".typing-guard") as HTMLElement;
    guard.style.display = on ? "" : "none";
  }

  isTyping(): boolean {
    const guard = this.root.querySelector(".typing-guard") as HTMLElement;
    return guard.style.display !== "none";
  }

  addLearnerTurn(text: string): HTMLElement {
    const bubble = document.createElement("div");
    bubble.className = "message learner";
    const span = document.createElement("span");
    span.className = "text";
    span.textContent = text;
    bubble.append(span);
    this.list.append(bubble);
    return bubble;
  }

  /** Marks the most recent learner message when it produced a target skill. */
  applyLearnerDetections(detections: number[]): void {
    const produced = detections.filter((sid) => this.options.targetSkills.includes(sid));
    const bubbles = this.list.querySelectorAll(".message.learner");
    const last = bubbles[bubbles.length - 1];
    if (!last || produced.length === 0) {
      return;
    }
    const badge = document.createElement("span");
    badge.className = "badge target-skill";
    badge.textContent = `target skill used: ${produced.join(", ")}`;
    last.append(badge);
  }

  beginBotStream(): void {
    this.streamed = "";
    this.streamingElement = document.createElement("div");
    this.streamingElement.className = "message bot streaming";
    this.list.append(this.streamingElement);
    this.setTyping(true);
  }

  appendToken(token: string): void {
    if (!this.streamingElement) {
      this.beginBotStream();
    }
    this.streamed += token;
    (this.streamingElement as HTMLElement).textContent = this.streamed;
    this.renderCount += 1;
  }

  streamedText(): string {
    return this.streamed;
  }

  /** Replace the streaming bubble with highlighted final content. */
  finalizeBotTurn(payload: TurnPayload): HTMLElement {
    const bubble = this.streamingElement ?? document.createElement("div");
    bubble.className = "message bot";
    bubble.textContent = "";
    for (const segment of segmentText(payload.text, payload.skill_spans)) {
      if (segment.skills.length === 0) {
        bubble.append(document.createTextNode(segment.text));
        continue;
      }
      const mark = document.createElement("mark");
      mark.className = "skill-span";
      mark.dataset.skills = segment.skills.join(",");
      mark.title = segment.skills
        .map((sid) => this.options.skillIndex.get(sid)?.can_do ?? `skill ${sid}`)
        .join("\n");
      mark.textContent = segment.text;
      bubble.append(mark);
    }
    if (!this.streamingElement) {
      this.list.append(bubble);
    }
    this.streamingElement = null;
    this.applyLearnerDetections(payload.learner_detections);
    this.setTyping(false);
    return bubble;
  }

  renderedText(): string {
    const bubbles = this.list.querySelectorAll(".message");
    const last = bubbles[bubbles.length - 1];
    return last?.textContent ?? "";
  }

  highlightedSegments(): { text: string; skills: number[] }[] {
    const bubbles = this.list.querySelectorAll(".message.bot");
    const last = bubbles[bubbles.length - 1];
    if (!last) {
      return [];
    }
    return Array.from(last.querySelectorAll("mark.skill-span")).map((mark) => ({
      text: mark.textContent ?? "",
      skills: ((mark as HTMLElement).dataset.skills ?? "")
        .split(",")
        .filter(Boolean)
        .map(Number),
    }));
  }
}
