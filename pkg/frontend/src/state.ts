// Session-side state machine. Drafts live here until an explicit submit;
// once the backend acknowledges a response the item becomes read-only.

import type { Ack, RectAnnotation, ResponsePayload } from './api'

export interface Draft {
  answer?: string
  realism_score?: number
  annotations: RectAnnotation[]
}

export interface SubmittedRecord {
  payload: ResponsePayload
  ack: Ack
}

export type Task = 'discrimination' | 'comparative' | 'annotation'

export class UiSessionState {
  readonly sessionId: string
  readonly task: Task
  readonly totalItems: number
  currentIndex = 0
  draft: Draft = { annotations: [] }
  private submitted = new Map<string, SubmittedRecord>()

  constructor(sessionId: string, task: Task, totalItems: number) {
    this.sessionId = sessionId
    this.task = task
    this.totalItems = totalItems
  }

  resetDraft(): void {
    this.draft = { annotations: [] }
  }

  isSubmitted(itemId: string): boolean {
    return this.submitted.has(itemId)
  }

  recordedResponse(itemId: string): SubmittedRecord | undefined {
    return this.submitted.get(itemId)
  }

  /** Validation messages blocking a submit; empty array means ready. */
  validateDraft(): string[] {
    const problems: string[] = []
    if (this.task === 'discrimination') {
      if (this.draft.answer !== 'real' && this.draft.answer !== 'synthetic') {
        problems.push('Choose Real or Synthetic before submitting.')
      }
    } else if (this.task === 'comparative') {
      if (this.draft.answer !== 'a' && this.draft.answer !== 'b') {
        problems.push('Pick the image you believe is real.')
      }
    } else {
      const score = this.draft.realism_score
      if (score === undefined || !Number.isInteger(score) || score < 0 || score > 10) {
        problems.push('A realism score from 0 to 10 is required.')
      }
    }
    return problems
  }

  buildPayload(itemId: string): ResponsePayload {
    const payload: ResponsePayload = { item_id: itemId }
    if (this.draft.answer !== undefined) payload.answer = this.draft.answer
    if (this.draft.realism_score !== undefined) payload.realism_score = this.draft.realism_score
    if (this.draft.annotations.length > 0) payload.annotations = this.draft.annotations
    return payload
  }

  markSubmitted(itemId: string, payload: ResponsePayload, ack: Ack): void {
    this.submitted.set(itemId, { payload, ack })
    this.currentIndex = Math.min(this.currentIndex + 1, this.totalItems)
    this.resetDraft()
  }

  get done(): boolean {
    return this.submitted.size >= this.totalItems
  }
}
