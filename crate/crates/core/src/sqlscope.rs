//! Scope analysis over SQLite queries: which (table, column) pairs does a
//! statement reference?
//!
//! Parsing is delegated to `sqlparser`; this module walks the AST with an
//! explicit scope chain so aliases, derived tables, CTEs and correlated
//! subqueries resolve to base-table columns.
//!
//! A few rules worth knowing:
//!
//! * `*` and `t.*` in the outermost statement expand to every column of the
//!   in-scope source. Inside a derived table or CTE the expansion only
//!   feeds lineage, so a column is counted when the outer query actually
//!   uses it.
//! * A base table that appears in a `FROM` clause but contributes no column
//!   (for instance `SELECT COUNT(*) FROM t`) is recorded with its primary
//!   key columns.
//! * Following SQLite, a double-quoted identifier that resolves to nothing is
//!   treated as a string literal.

use std::collections::BTreeSet;
use std::ops::ControlFlow;

use serde::{Deserialize, Serialize};
use sqlparser::ast::{
    Expr, GroupByExpr, Ident, JoinConstraint, JoinOperator, ObjectName, ObjectNamePart, OrderBy,
    OrderByKind, Query, Select, SelectItem, SelectItemQualifiedWildcardKind, SetExpr, Statement,
    TableAlias, TableFactor, TableWithJoins, Visit, Visitor,
};
use sqlparser::dialect::SQLiteDialect;
use sqlparser::parser::Parser;

use crate::corpus::DatabaseSchema;
use crate::subset::{fold, SchemaSubset};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ScopeError {
    #[error("SQL parse error: {0}")]
    Parse(String),
    #[error("unresolved identifier `{identifier}`: {reason}")]
    Unresolved { identifier: String, reason: String },
    #[error("unsupported statement: {0}")]
    Unsupported(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Unresolved {
    pub identifier: String,
    pub reason: String,
}

/// The schema elements a statement references.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScopeReport {
    pub subset: SchemaSubset,
    pub unresolved: Vec<Unresolved>,
    pub used_star: bool,
}

/// Extracts every (table, column) pair referenced anywhere in `sql`.
///
/// In strict mode the first unresolvable identifier is an error; otherwise it
/// is recorded in [`ScopeReport::unresolved`] and extraction continues.
pub fn extract_referenced_schema(
    sql: &str,
    schema: &DatabaseSchema,
    strict: bool,
) -> Result<ScopeReport, ScopeError> {
    let statements =
        Parser::parse_sql(&SQLiteDialect {}, sql).map_err(|e| ScopeError::Parse(e.to_string()))?;
    if statements.is_empty() {
        return Err(ScopeError::Parse("no statement found".into()));
    }

    let mut ex = Extractor::new(schema);
    for stmt in &statements {
        match stmt {
            Statement::Query(q) => {
                ex.resolve_query(q, &[], &[], true);
            }
            other => {
                let text = other.to_string();
                let head: String = text.chars().take(40).collect();
                return Err(ScopeError::Unsupported(head));
            }
        }
    }

    if strict {
        if let Some(first) = ex.unresolved.first() {
            return Err(ScopeError::Unresolved {
                identifier: first.identifier.clone(),
                reason: first.reason.clone(),
            });
        }
    }
    Ok(ex.finish())
}

type Pair = (usize, usize);
type Lineage = BTreeSet<Pair>;

#[derive(Debug, Clone)]
struct OutCol {
    name: Option<String>,
    lineage: Lineage,
}

#[derive(Debug)]
enum SourceKind {
    Base(usize),
    Derived(Vec<OutCol>),
    /// Unknown relation; already reported.
    Opaque,
}

#[derive(Debug)]
struct Source {
    name: Option<String>,
    kind: SourceKind,
}

#[derive(Debug, Default)]
struct Scope {
    sources: Vec<Source>,
    aliases: Vec<(String, Lineage)>,
    using: BTreeSet<String>,
}

#[derive(Debug, Clone)]
struct Cte {
    name: String,
    cols: Vec<OutCol>,
}

struct ColumnRef {
    qualifier: Option<String>,
    column: String,
    raw: String,
    double_quoted: bool,
}

/// Collects column references at the current query level and the subqueries
/// directly nested in an expression; deeper levels are left to recursion.
#[derive(Default)]
struct RefCollector {
    depth: usize,
    refs: Vec<ColumnRef>,
    subqueries: Vec<Query>,
}

impl Visitor for RefCollector {
    type Break = ();

    fn pre_visit_query(&mut self, query: &Query) -> ControlFlow<()> {
        self.depth += 1;
        if self.depth == 1 {
            self.subqueries.push(query.clone());
        }
        ControlFlow::Continue(())
    }

    fn post_visit_query(&mut self, _query: &Query) -> ControlFlow<()> {
        self.depth -= 1;
        ControlFlow::Continue(())
    }

    fn pre_visit_expr(&mut self, expr: &Expr) -> ControlFlow<()> {
        if self.depth > 0 {
            return ControlFlow::Continue(());
        }
        match expr {
            Expr::Identifier(id) => self.refs.push(ColumnRef {
                qualifier: None,
                column: fold(&id.value),
                raw: id.value.clone(),
                double_quoted: id.quote_style == Some('"'),
            }),
            Expr::CompoundIdentifier(parts) if parts.len() >= 2 => {
                let col = &parts[parts.len() - 1];
                let qual = &parts[parts.len() - 2];
                self.refs.push(ColumnRef {
                    qualifier: Some(fold(&qual.value)),
                    column: fold(&col.value),
                    raw: format!("{}.{}", qual.value, col.value),
                    double_quoted: false,
                });
            }
            _ => {}
        }
        ControlFlow::Continue(())
    }
}

/// Bare words SQLite accepts where a column could appear.
const NON_COLUMN_WORDS: &[&str] = &[
    "rowid",
    "oid",
    "_rowid_",
    "current_date",
    "current_time",
    "current_timestamp",
    "true",
    "false",
    "null",
];

fn last_ident(name: &ObjectName) -> Option<&Ident> {
    name.0.iter().rev().find_map(|p| match p {
        ObjectNamePart::Identifier(id) => Some(id),
        _ => None,
    })
}

fn join_constraint(op: &JoinOperator) -> Option<&JoinConstraint> {
    use JoinOperator::*;
    match op {
        Join(c) | Inner(c) | Left(c) | LeftOuter(c) | Right(c) | RightOuter(c) | FullOuter(c)
        | CrossJoin(c) | Semi(c) | LeftSemi(c) | RightSemi(c) | Anti(c) | LeftAnti(c)
        | RightAnti(c) | StraightJoin(c) => Some(c),
        AsOf { constraint, .. } => Some(constraint),
        _ => None,
    }
}

fn rename(mut cols: Vec<OutCol>, alias: Option<&TableAlias>) -> Vec<OutCol> {
    if let Some(alias) = alias {
        for (col, def) in cols.iter_mut().zip(&alias.columns) {
            col.name = Some(fold(&def.name.value));
        }
    }
    cols
}

fn union_lineage<'a>(cols: impl IntoIterator<Item = &'a OutCol>) -> Lineage {
    cols.into_iter().flat_map(|c| c.lineage.iter().copied()).collect()
}

#[derive(Default)]
struct PendingJoins<'q> {
    on: Vec<&'q Expr>,
    /// Column names joined with USING / NATURAL, and how many sources were
    /// in scope when the join was seen.
    using: Vec<(String, usize)>,
}

struct Extractor<'s> {
    schema: &'s DatabaseSchema,
    found: BTreeSet<Pair>,
    found_order: Vec<Pair>,
    touched: Vec<usize>,
    unresolved: Vec<Unresolved>,
    used_star: bool,
}

impl<'s> Extractor<'s> {
    fn new(schema: &'s DatabaseSchema) -> Self {
        Extractor {
            schema,
            found: BTreeSet::new(),
            found_order: Vec::new(),
            touched: Vec::new(),
            unresolved: Vec::new(),
            used_star: false,
        }
    }

    fn finish(mut self) -> ScopeReport {
        for t in self.touched.clone() {
            if self.found.iter().any(|&(ft, _)| ft == t) {
                continue;
            }
            let table = &self.schema.tables[t];
            let keys: Vec<usize> = table
                .key_columns()
                .into_iter()
                .filter_map(|k| table.column_index(k))
                .collect();
            for c in keys {
                self.mark((t, c));
            }
        }
        let mut subset = SchemaSubset::new();
        for &(t, c) in &self.found_order {
            let table = &self.schema.tables[t];
            subset.insert(&table.name, &table.columns[c].name);
        }
        ScopeReport {
            subset,
            unresolved: self.unresolved,
            used_star: self.used_star,
        }
    }

    fn mark(&mut self, pair: Pair) {
        if self.found.insert(pair) {
            self.found_order.push(pair);
        }
    }

    fn mark_all(&mut self, lineage: &Lineage) {
        for &p in lineage {
            self.mark(p);
        }
    }

    fn unresolved(&mut self, identifier: impl Into<String>, reason: impl Into<String>) {
        let entry = Unresolved {
            identifier: identifier.into(),
            reason: reason.into(),
        };
        if !self.unresolved.contains(&entry) {
            self.unresolved.push(entry);
        }
    }

    fn resolve_query(
        &mut self,
        q: &Query,
        chain: &[&Scope],
        ctes: &[Cte],
        top: bool,
    ) -> Vec<OutCol> {
        let mut env: Vec<Cte> = ctes.to_vec();
        if let Some(with) = &q.with {
            for cte in &with.cte_tables {
                let name = fold(&cte.alias.name.value);
                let cols = match (&*cte.query.body, with.recursive) {
                    (SetExpr::SetOperation { left, .. }, true) => {
                        // The anchor fixes the column shape before the
                        // recursive member can refer to the CTE itself.
                        let anchor = self.resolve_set_expr(left, chain, &env, None, false);
                        let mut inner = env.clone();
                        inner.push(Cte {
                            name: name.clone(),
                            cols: rename(anchor, Some(&cte.alias)),
                        });
                        self.resolve_query(&cte.query, chain, &inner, false)
                    }
                    _ => self.resolve_query(&cte.query, chain, &env, false),
                };
                env.push(Cte {
                    name,
                    cols: rename(cols, Some(&cte.alias)),
                });
            }
        }
        self.resolve_set_expr(&q.body, chain, &env, q.order_by.as_ref(), top)
    }

    fn resolve_set_expr(
        &mut self,
        body: &SetExpr,
        chain: &[&Scope],
        env: &[Cte],
        order_by: Option<&OrderBy>,
        top: bool,
    ) -> Vec<OutCol> {
        match body {
            SetExpr::Select(select) => self.resolve_select(select, chain, env, order_by, top),
            SetExpr::Query(q) => {
                let outs = self.resolve_query(q, chain, env, top);
                self.resolve_output_order(order_by, &outs, chain, env);
                outs
            }
            SetExpr::SetOperation { left, right, .. } => {
                let mut outs = self.resolve_set_expr(left, chain, env, None, top);
                let rhs = self.resolve_set_expr(right, chain, env, None, top);
                for (l, r) in outs.iter_mut().zip(rhs) {
                    l.lineage.extend(r.lineage);
                }
                self.resolve_output_order(order_by, &outs, chain, env);
                outs
            }
            SetExpr::Values(values) => {
                let mut outs: Vec<OutCol> = Vec::new();
                for row in &values.rows {
                    for (i, e) in row.content.iter().enumerate() {
                        let lineage = self.resolve_expr(e, chain, env);
                        if outs.len() <= i {
                            outs.push(OutCol {
                                name: Some(format!("column{}", i + 1)),
                                lineage,
                            });
                        } else {
                            outs[i].lineage.extend(lineage);
                        }
                    }
                }
                outs
            }
            other => {
                let text: String = other.to_string().chars().take(40).collect();
                self.unresolved(text, "unsupported query body");
                Vec::new()
            }
        }
    }

    /// ORDER BY after a compound select refers to output columns by name.
    fn resolve_output_order(
        &mut self,
        order_by: Option<&OrderBy>,
        outs: &[OutCol],
        chain: &[&Scope],
        env: &[Cte],
    ) {
        let Some(OrderBy {
            kind: OrderByKind::Expressions(exprs),
            ..
        }) = order_by
        else {
            return;
        };
        let scope = Scope {
            aliases: outs
                .iter()
                .filter_map(|c| c.name.clone().map(|n| (n, c.lineage.clone())))
                .collect(),
            ..Scope::default()
        };
        let mut inner: Vec<&Scope> = chain.to_vec();
        inner.push(&scope);
        for o in exprs {
            self.resolve_expr(&o.expr, &inner, env);
        }
    }

    fn resolve_select(
        &mut self,
        select: &Select,
        chain: &[&Scope],
        env: &[Cte],
        order_by: Option<&OrderBy>,
        top: bool,
    ) -> Vec<OutCol> {
        let mut scope = Scope::default();
        let mut pending = PendingJoins::default();
        for twj in &select.from {
            self.add_from(twj, &mut scope, &mut pending, chain, env);
        }
        for (name, upto) in &pending.using {
            let lineage: Lineage = scope.sources[..*upto]
                .iter()
                .filter_map(|s| self.source_column(s, name))
                .flatten()
                .collect();
            self.mark_all(&lineage);
            scope.using.insert(name.clone());
        }

        let mut outs = Vec::new();
        let mut aliases = Vec::new();
        {
            let mut inner: Vec<&Scope> = chain.to_vec();
            inner.push(&scope);
            for e in &pending.on {
                self.resolve_expr(e, &inner, env);
            }
            for item in &select.projection {
                match item {
                    SelectItem::UnnamedExpr(e) => {
                        let lineage = self.resolve_expr(e, &inner, env);
                        let name = match e {
                            Expr::Identifier(id) => Some(fold(&id.value)),
                            Expr::CompoundIdentifier(parts) => parts.last().map(|p| fold(&p.value)),
                            _ => None,
                        };
                        outs.push(OutCol { name, lineage });
                    }
                    SelectItem::ExprWithAlias { expr, alias } => {
                        let lineage = self.resolve_expr(expr, &inner, env);
                        aliases.push((fold(&alias.value), lineage.clone()));
                        outs.push(OutCol {
                            name: Some(fold(&alias.value)),
                            lineage,
                        });
                    }
                    SelectItem::ExprWithAliases { expr, aliases: names } => {
                        let lineage = self.resolve_expr(expr, &inner, env);
                        for a in names {
                            outs.push(OutCol {
                                name: Some(fold(&a.value)),
                                lineage: lineage.clone(),
                            });
                        }
                    }
                    SelectItem::Wildcard(_) => {
                        self.used_star = true;
                        for src in &scope.sources {
                            let cols = self.expand(src);
                            if top {
                                for c in &cols {
                                    self.mark_all(&c.lineage);
                                }
                            }
                            outs.extend(cols);
                        }
                    }
                    SelectItem::QualifiedWildcard(kind, _) => {
                        self.used_star = true;
                        let qualifier = match kind {
                            SelectItemQualifiedWildcardKind::ObjectName(name) => {
                                last_ident(name).map(|i| fold(&i.value))
                            }
                            SelectItemQualifiedWildcardKind::Expr(_) => None,
                        };
                        let src = qualifier
                            .as_ref()
                            .and_then(|q| scope.sources.iter().find(|s| s.name.as_ref() == Some(q)));
                        match src {
                            Some(src) => {
                                let cols = self.expand(src);
                                if top {
                                    for c in &cols {
                                        self.mark_all(&c.lineage);
                                    }
                                }
                                outs.extend(cols);
                            }
                            None => self.unresolved(
                                format!("{}.*", qualifier.unwrap_or_default()),
                                "unknown table or alias",
                            ),
                        }
                    }
                }
            }
        }
        scope.aliases = aliases;

        let mut inner: Vec<&Scope> = chain.to_vec();
        inner.push(&scope);
        let mut clauses: Vec<&Expr> = Vec::new();
        clauses.extend(select.selection.as_ref());
        if let GroupByExpr::Expressions(exprs, _) = &select.group_by {
            clauses.extend(exprs);
        }
        clauses.extend(select.having.as_ref());
        clauses.extend(select.qualify.as_ref());
        if let Some(OrderBy {
            kind: OrderByKind::Expressions(exprs),
            ..
        }) = order_by
        {
            clauses.extend(exprs.iter().map(|o| &o.expr));
        }
        for e in clauses {
            self.resolve_expr(e, &inner, env);
        }
        outs
    }

    fn add_from<'q>(
        &mut self,
        twj: &'q TableWithJoins,
        scope: &mut Scope,
        pending: &mut PendingJoins<'q>,
        chain: &[&Scope],
        env: &[Cte],
    ) {
        self.add_factor(&twj.relation, scope, pending, chain, env);
        for join in &twj.joins {
            let before = scope.sources.len();
            self.add_factor(&join.relation, scope, pending, chain, env);
            match join_constraint(&join.join_operator) {
                Some(JoinConstraint::On(e)) => pending.on.push(e),
                Some(JoinConstraint::Using(names)) => {
                    for n in names {
                        if let Some(id) = last_ident(n) {
                            pending.using.push((fold(&id.value), scope.sources.len()));
                        }
                    }
                }
                Some(JoinConstraint::Natural) => {
                    let left: BTreeSet<String> = scope.sources[..before]
                        .iter()
                        .flat_map(|s| self.expand(s))
                        .filter_map(|c| c.name)
                        .collect();
                    let right: BTreeSet<String> = scope.sources[before..]
                        .iter()
                        .flat_map(|s| self.expand(s))
                        .filter_map(|c| c.name)
                        .collect();
                    for name in left.intersection(&right) {
                        pending.using.push((name.clone(), scope.sources.len()));
                    }
                }
                _ => {}
            }
        }
    }

    fn add_factor<'q>(
        &mut self,
        factor: &'q TableFactor,
        scope: &mut Scope,
        pending: &mut PendingJoins<'q>,
        chain: &[&Scope],
        env: &[Cte],
    ) {
        match factor {
            TableFactor::Table {
                name, alias, args, ..
            } => {
                let Some(ident) = last_ident(name) else {
                    self.unresolved(name.to_string(), "unsupported table name");
                    return;
                };
                if args.is_some() {
                    self.unresolved(name.to_string(), "table-valued functions are not supported");
                    scope.sources.push(Source {
                        name: alias.as_ref().map(|a| fold(&a.name.value)),
                        kind: SourceKind::Opaque,
                    });
                    return;
                }
                let key = fold(&ident.value);
                let visible = Some(alias.as_ref().map_or(key.clone(), |a| fold(&a.name.value)));
                if let Some(cte) = env.iter().rev().find(|c| c.name == key) {
                    scope.sources.push(Source {
                        name: visible,
                        kind: SourceKind::Derived(rename(cte.cols.clone(), alias.as_ref())),
                    });
                } else if let Some(idx) = self.schema.table_index(&ident.value) {
                    if !self.touched.contains(&idx) {
                        self.touched.push(idx);
                    }
                    scope.sources.push(Source {
                        name: visible,
                        kind: SourceKind::Base(idx),
                    });
                } else {
                    self.unresolved(ident.value.clone(), "unknown table");
                    scope.sources.push(Source {
                        name: visible,
                        kind: SourceKind::Opaque,
                    });
                }
            }
            TableFactor::Derived {
                subquery, alias, ..
            } => {
                let cols = self.resolve_query(subquery, chain, env, false);
                scope.sources.push(Source {
                    name: alias.as_ref().map(|a| fold(&a.name.value)),
                    kind: SourceKind::Derived(rename(cols, alias.as_ref())),
                });
            }
            TableFactor::NestedJoin {
                table_with_joins, ..
            } => self.add_from(table_with_joins, scope, pending, chain, env),
            other => {
                let text: String = other.to_string().chars().take(40).collect();
                self.unresolved(text, "unsupported table factor");
                scope.sources.push(Source {
                    name: None,
                    kind: SourceKind::Opaque,
                });
            }
        }
    }

    fn expand(&self, src: &Source) -> Vec<OutCol> {
        match &src.kind {
            SourceKind::Base(t) => self.schema.tables[*t]
                .columns
                .iter()
                .enumerate()
                .map(|(c, col)| OutCol {
                    name: Some(fold(&col.name)),
                    lineage: Lineage::from([(*t, c)]),
                })
                .collect(),
            SourceKind::Derived(cols) => cols.clone(),
            SourceKind::Opaque => Vec::new(),
        }
    }

    fn source_column(&self, src: &Source, column: &str) -> Option<Lineage> {
        match &src.kind {
            SourceKind::Base(t) => self.schema.tables[*t]
                .column_index(column)
                .map(|c| Lineage::from([(*t, c)])),
            SourceKind::Derived(cols) => {
                let hits: Vec<&OutCol> =
                    cols.iter().filter(|c| c.name.as_deref() == Some(column)).collect();
                if hits.is_empty() {
                    None
                } else {
                    Some(union_lineage(hits))
                }
            }
            SourceKind::Opaque => None,
        }
    }

    fn resolve_expr(&mut self, expr: &Expr, chain: &[&Scope], env: &[Cte]) -> Lineage {
        let mut collector = RefCollector::default();
        let _ = expr.visit(&mut collector);
        let mut lineage = Lineage::new();
        for r in &collector.refs {
            lineage.extend(self.resolve_ref(r, chain));
        }
        for q in &collector.subqueries {
            let outs = self.resolve_query(q, chain, env, false);
            lineage.extend(union_lineage(&outs));
        }
        lineage
    }

    fn resolve_ref(&mut self, r: &ColumnRef, chain: &[&Scope]) -> Lineage {
        if let Some(qualifier) = &r.qualifier {
            for scope in chain.iter().rev() {
                let Some(src) = scope
                    .sources
                    .iter()
                    .find(|s| s.name.as_ref() == Some(qualifier))
                else {
                    continue;
                };
                if matches!(src.kind, SourceKind::Opaque) {
                    return Lineage::new();
                }
                return match self.source_column(src, &r.column) {
                    Some(l) => {
                        self.mark_all(&l);
                        l
                    }
                    None => {
                        self.unresolved(r.raw.clone(), "unknown column");
                        Lineage::new()
                    }
                };
            }
            self.unresolved(r.raw.clone(), "unknown table or alias");
            return Lineage::new();
        }

        for scope in chain.iter().rev() {
            let hits: Vec<Lineage> = scope
                .sources
                .iter()
                .filter_map(|s| self.source_column(s, &r.column))
                .collect();
            match hits.len() {
                0 => {}
                1 => {
                    self.mark_all(&hits[0]);
                    return hits.into_iter().next().unwrap_or_default();
                }
                _ if scope.using.contains(&r.column) => {
                    let l: Lineage = hits.into_iter().flatten().collect();
                    self.mark_all(&l);
                    return l;
                }
                _ => {
                    self.unresolved(r.raw.clone(), "ambiguous column");
                    return Lineage::new();
                }
            }
            if let Some((_, l)) = scope.aliases.iter().find(|(a, _)| *a == r.column) {
                return l.clone();
            }
        }
        if r.double_quoted || NON_COLUMN_WORDS.contains(&r.column.as_str()) {
            return Lineage::new();
        }
        let has_opaque = chain
            .iter()
            .any(|s| s.sources.iter().any(|src| matches!(src.kind, SourceKind::Opaque)));
        if !has_opaque {
            self.unresolved(r.raw.clone(), "unknown column");
        }
        Lineage::new()
    }
}
