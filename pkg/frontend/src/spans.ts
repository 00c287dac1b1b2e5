/**
 * Token-level span highlighting.
 *
 * The API reports skill spans as token ranges over the service tokenizer.
 * This module re-tokenizes the turn text with the identical rule (words with
 * apostrophes, single punctuation marks) and converts token ranges into
 * character segments whose concatenation reproduces the text byte-for-byte.
 */

import type { SkillSpan } from "./types.js";

const TOKEN_RE = /[A-Za-z0-9']+|[^\sA-Za-z0-9']/g;

export interface TokenOffset {
  text: string;
  start: number;
  end: number; // exclusive
}

export function tokenizeWithOffsets(text: string): TokenOffset[] {
  const tokens: TokenOffset[] = [];
  for (const match of text.matchAll(TOKEN_RE)) {
    const start = match.index ?? 0;
    tokens.push({ text: match[0], start, end: start + match[0].length });
  }
  return tokens;
}

export interface Segment {
  text: string;
  skills: number[]; // sorted skill ids highlighting this segment
}

/**
 * Split the text into contiguous segments, each carrying the set of skills
 * whose spans cover it. Segment texts concatenate to the original text.
 */
export function segmentText(text: string, spans: SkillSpan[]): Segment[] {
  const tokens = tokenizeWithOffsets(text);
  if (tokens.length === 0) {
    return text ? [{ text, skills: [] }] : [];
  }
  const perToken: Set<number>[] = tokens.map(() => new Set());
  for (const span of spans) {
    for (let i = span.start_token; i < span.end_token && i < tokens.length; i++) {
      perToken[i].add(span.skill_id);
    }
  }
  const segments: Segment[] = [];
  const leading = text.slice(0, tokens[0].start);
  if (leading) {
    segments.push({ text: leading, skills: [] });
  }
  let current: Segment | null = null;
  for (let i = 0; i < tokens.length; i++) {
    const sliceEnd = i + 1 < tokens.length ? tokens[i + 1].start : text.length;
    const slice = text.slice(tokens[i].start, sliceEnd);
    const skills = Array.from(perToken[i]).sort((a, b) => a - b);
    if (current && sameSkills(current.skills, skills)) {
      current.text += slice;
    } else {
      current = { text: slice, skills };
      segments.push(current);
    }
  }
  return segments;
}

function sameSkills(a: number[], b: number[]): boolean {
  return a.length === b.length && a.every((v, i) => v === b[i]);
}

/** Sanity check used by the UI: the span's recorded tokens must match the
 * client-side tokenization of the same range. */
export function spanMatchesTokens(text: string, span: SkillSpan): boolean {
  const tokens = tokenizeWithOffsets(text);
  const slice = tokens.slice(span.start_token, span.end_token).map((t) => t.text);
  return (
    slice.length === span.tokens.length && slice.every((t, i) => t === span.tokens[i])
  );
}
